//! Closed-loop orchestration and Monte Carlo evaluation.
//!
//! One episode walks k = 0..N in a fixed order: the plant emits y_k, the
//! encoder filters and refreshes its mismatch with the step-(k−1)
//! acknowledgment, the decoder consumes z_k and issues a_k, the encoder
//! decides TX/RTX and the channel carries the packet, and finally the
//! plant advances. Decisions at k can therefore only influence costs from
//! k+1 on, and the decoder's information set at k includes z_k.
//!
//! Every step cross-checks the redundant recursions against their
//! definitions (mismatch vs x̌−x̂, decoder-error recursion vs x−x̂, channel
//! τ vs the encoder's acknowledgment-derived view); any disagreement aborts
//! the run with a labeled diagnostic rather than silently drifting.
//!
//! Runs are embarrassingly parallel: every run derives its own RNG
//! substreams from (seed, run index), so summaries are bit-identical
//! across worker counts, and policy changes never shift the noise draws
//! (common random numbers).

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{Channel, ChannelOutput, Decision, Transmission};
use crate::decoder::DecoderState;
use crate::dp_oracle::{build_tables_from_schedules, DpConfig, ValueTables};
use crate::encoder::{DecisionOutcome, DecisionReason, DeltaMode, EncoderState};
use crate::estimator::CovarianceSchedule;
use crate::lqr::{riccati_backward, GainSchedule};
use crate::model::{validate_scenario, CostSpec, Policy, ScenarioConfig, Schedule, SystemModel};
use crate::rng::{psd_sqrt, sample_gaussian, substream, Substream};
use crate::{Error, Result};

/// Scaled absolute tolerance for the per-step recursion audits.
const AUDIT_TOL: f64 = 1e-9;

impl Serialize for Decision {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl Serialize for DecisionReason {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

/// True plant state.
#[derive(Debug, Clone)]
pub struct PlantState {
    pub x: DVector<f64>,
    pub k: usize,
}

/// Everything observable about one step of one run.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub k: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Decision,
    pub gamma: bool,
    pub tau: usize,
    pub omega: usize,
    pub fading_state: usize,
    pub lambda_used: f64,
    /// Status of the consumed channel output z_k.
    pub z_delivered: bool,
    pub z_origin: Option<usize>,
    pub x_hat: Vec<f64>,
    pub a: Vec<f64>,
    pub stage_cost: f64,
    pub omega_stat: Option<f64>,
    pub delta: Option<f64>,
    pub e_tilde_norm: f64,
    pub epsilon_norm: Option<f64>,
    pub e_hat_norm: f64,
    pub forced_reason: DecisionReason,
}

/// Per-run aggregate counters.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Totals {
    pub tx: usize,
    pub rtx: usize,
    pub packet_losses: usize,
    pub forced_tau0: usize,
    pub forced_omega_cap: usize,
    pub threshold_decisions: usize,
    /// Σ_k λ_used — the decision-weighted expected erasure count.
    pub expected_erasures: f64,
    /// Σ_k λ_used (1 − λ_used) — its variance, for standard-error checks.
    pub erasure_variance: f64,
}

/// Full record of one episode: per-step rows for k = 0..N plus the
/// terminal state x_{N+1} and its cost share.
#[derive(Debug, Clone, Serialize)]
pub struct RunTrace {
    pub run_index: u64,
    pub steps: Vec<StepRecord>,
    pub x_terminal: Vec<f64>,
    pub terminal_cost: f64,
    /// The delivery arriving at N+1 is logged even though no control
    /// remains to use it.
    pub z_terminal_delivered: bool,
    pub z_terminal_origin: Option<usize>,
    pub totals: Totals,
    /// Realized value of the per-run objective.
    pub upsilon: f64,
    /// Largest per-step disagreement between the mismatch recursion and
    /// its definition x̌ − x̂ over the run.
    pub audit_max_mismatch_gap: f64,
    /// Largest per-step disagreement between the decoder-error recursion
    /// and its definition x − x̂ over the run.
    pub audit_max_error_gap: f64,
}

/// A switching policy with the same decision interface as the optimal one.
/// Forced rules (nothing pending, budget exhausted) apply to every policy.
#[derive(Debug, Clone)]
pub enum PolicyRuntime {
    Optimal,
    AlwaysTx,
    Random(f64),
    AgeThreshold(usize),
}

impl PolicyRuntime {
    /// Resolve a scenario policy selector into a runnable policy.
    pub fn from_policy(policy: Policy) -> Result<PolicyRuntime> {
        match policy {
            Policy::HarqOptimal | Policy::HarqOptimalExactDelta => Ok(PolicyRuntime::Optimal),
            Policy::AlwaysTx => Ok(PolicyRuntime::AlwaysTx),
            Policy::Random(p) => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Unsupported(format!(
                        "random({p}): probability outside [0, 1]"
                    )));
                }
                Ok(PolicyRuntime::Random(p))
            }
            Policy::AgeThreshold(d) => {
                if d < 1 {
                    return Err(Error::Unsupported(
                        "age_threshold(d): d must be >= 1".into(),
                    ));
                }
                Ok(PolicyRuntime::AgeThreshold(d))
            }
        }
    }

    fn decide(
        &self,
        enc: &EncoderState,
        gains: &GainSchedule,
        cfg: &ScenarioConfig,
        tables: Option<&ValueTables>,
        policy_rng: &mut ChaCha8Rng,
    ) -> Result<DecisionOutcome> {
        let k = enc.filter.k();
        let tau = enc.link_view.tau;
        if tau == 0 {
            return Ok(DecisionOutcome {
                decision: Decision::Tx,
                reason: DecisionReason::Tau0,
                omega_stat: None,
                delta: None,
                payload_origin: k,
            });
        }
        if enc.link_view.omega > cfg.channel.omega_max {
            return Ok(DecisionOutcome {
                decision: Decision::Tx,
                reason: DecisionReason::OmegaCap,
                omega_stat: None,
                delta: None,
                payload_origin: k,
            });
        }
        match self {
            PolicyRuntime::Optimal => enc.decide(gains, &cfg.channel, &cfg.system, tables),
            PolicyRuntime::AlwaysTx => Ok(free_choice(Decision::Tx, k, tau)),
            PolicyRuntime::Random(p) => {
                let draw: f64 = policy_rng.random();
                let d = if draw < *p {
                    Decision::Rtx
                } else {
                    Decision::Tx
                };
                Ok(free_choice(d, k, tau))
            }
            PolicyRuntime::AgeThreshold(d) => {
                let choose_rtx = tau <= *d;
                let dec = if choose_rtx {
                    Decision::Rtx
                } else {
                    Decision::Tx
                };
                Ok(free_choice(dec, k, tau))
            }
        }
    }
}

fn free_choice(decision: Decision, k: usize, tau: usize) -> DecisionOutcome {
    DecisionOutcome {
        decision,
        reason: DecisionReason::Threshold,
        omega_stat: None,
        delta: None,
        payload_origin: match decision {
            Decision::Tx => k,
            Decision::Rtx => k - tau,
        },
    }
}

/// Precomputed per-scenario machinery shared by all runs.
pub struct Simulator {
    cfg: ScenarioConfig,
    gains: Arc<GainSchedule>,
    cov: Arc<CovarianceSchedule>,
    dp_tables: Option<Arc<ValueTables>>,
    policy: PolicyRuntime,
    delta_mode: DeltaMode,
    sqrt_m0: DMatrix<f64>,
    sqrt_w: Schedule<DMatrix<f64>>,
    sqrt_v: Schedule<DMatrix<f64>>,
}

fn sqrt_schedule(s: &Schedule<DMatrix<f64>>) -> Schedule<DMatrix<f64>> {
    match s {
        Schedule::Constant(m) => Schedule::Constant(psd_sqrt(m)),
        Schedule::PerStep(ms) => Schedule::PerStep(ms.iter().map(psd_sqrt).collect()),
    }
}

impl Simulator {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        Self::with_policy(cfg, cfg.policy)
    }

    /// Build a simulator for the scenario under a (possibly overridden)
    /// policy. Validates the effective configuration first.
    pub fn with_policy(cfg: &ScenarioConfig, policy: Policy) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.policy = policy;
        let violations = validate_scenario(&cfg);
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }

        let gains = Arc::new(riccati_backward(&cfg.system, &cfg.cost, cfg.horizon)?);
        let cov = Arc::new(CovarianceSchedule::compute(&cfg.system, cfg.horizon)?);
        let delta_mode = match policy {
            Policy::HarqOptimalExactDelta => DeltaMode::Exact,
            _ => DeltaMode::Zero,
        };
        let dp_tables = if delta_mode == DeltaMode::Exact {
            Some(Arc::new(build_tables_from_schedules(
                &cfg,
                &cov,
                &gains,
                DpConfig::default(),
            )?))
        } else {
            None
        };

        Ok(Simulator {
            policy: PolicyRuntime::from_policy(policy)?,
            sqrt_m0: psd_sqrt(&cfg.system.m0_cov),
            sqrt_w: sqrt_schedule(&cfg.system.w),
            sqrt_v: sqrt_schedule(&cfg.system.v),
            gains,
            cov,
            dp_tables,
            delta_mode,
            cfg,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn gains(&self) -> &GainSchedule {
        &self.gains
    }

    pub fn covariances(&self) -> &CovarianceSchedule {
        &self.cov
    }

    /// Execute one full episode under this simulator's policy.
    pub fn run_episode(&self, run_index: u64) -> Result<RunTrace> {
        self.run_episode_internal(run_index, true)
    }

    fn run_episode_internal(&self, run_index: u64, record_steps: bool) -> Result<RunTrace> {
        let cfg = &self.cfg;
        let sys = &cfg.system;
        let horizon = cfg.horizon;
        let n = sys.state_dim();
        let p_dim = sys.output_dim();
        let seed = cfg.seed;

        let mut rng_proc = substream(seed, run_index, Substream::ProcessNoise);
        let mut rng_meas = substream(seed, run_index, Substream::MeasurementNoise);
        let mut rng_eras = substream(seed, run_index, Substream::Erasure);
        let mut rng_fade = substream(seed, run_index, Substream::Fading);
        let mut rng_policy = substream(seed, run_index, Substream::Policy);

        let zero_n = DVector::zeros(n);
        let zero_p = DVector::zeros(p_dim);

        let mut x = sample_gaussian(&sys.m0, &self.sqrt_m0, &mut rng_proc);
        let mut channel = Channel::new(&cfg.channel);
        let mut decoder = DecoderState::new(sys, cfg.channel.omega_max);
        let mut encoder: Option<EncoderState> = None;
        let mut z: ChannelOutput = ChannelOutput::Erased;
        let mut prev: Option<(Decision, bool, usize)> = None;
        let mut a_prev = DVector::zeros(sys.input_dim());

        // Redundant-recursion audit state.
        let ring_cap = cfg.channel.omega_max + 2;
        let mut e_check_ring: VecDeque<(usize, DVector<f64>)> = VecDeque::new();
        let mut w_ring: VecDeque<(usize, DVector<f64>)> = VecDeque::new();
        let mut e_hat_rec = DVector::zeros(n);

        let mut steps: Vec<StepRecord> = if record_steps {
            Vec::with_capacity(horizon + 1)
        } else {
            Vec::new()
        };
        let mut totals = Totals::default();
        let mut upsilon = 0.0;
        let mut max_mismatch_gap = 0.0f64;
        let mut max_error_gap = 0.0f64;

        for k in 0..=horizon {
            // (1) The plant emits y_k.
            let v_k = sample_gaussian(&zero_p, self.sqrt_v.at(k), &mut rng_meas);
            let y = sys.c_at(k) * &x + v_k;

            // (2) Encoder: filter to k, then refresh the mismatch with the
            // step-(k−1) acknowledgment.
            match encoder.as_mut() {
                None => {
                    encoder = Some(EncoderState::new(
                        sys,
                        &cfg.channel,
                        &y,
                        Arc::clone(&self.cov),
                        self.delta_mode,
                    ));
                }
                Some(enc) => {
                    let (u_prev, g_prev, tau_prev) =
                        prev.expect("acknowledgment missing after step 0");
                    enc.advance_filter(&a_prev, &y, sys);
                    enc.update_mismatch(u_prev, g_prev, tau_prev, sys)?;
                }
            }
            let enc = encoder.as_mut().expect("encoder initialized above");

            // (3) Decoder consumes z_k.
            let (z_delivered, z_origin) = match &z {
                ChannelOutput::Delivered(pl) => (true, Some(pl.origin)),
                ChannelOutput::Erased => (false, None),
            };
            if k > 0 {
                let (u_prev, g_prev, tau_prev) = prev.expect("checked above");
                decoder.update_estimate(&z, u_prev, g_prev, tau_prev, sys)?;
            }

            // Cross-module audits: recursions vs definitions, protocol sync.
            let x_check = enc.filter.x_check().clone();
            e_check_ring.push_back((k, &x - &x_check));
            while e_check_ring.len() > ring_cap {
                e_check_ring.pop_front();
            }
            if k == 0 {
                e_hat_rec = &x - &sys.m0;
            } else {
                let (u_prev, g_prev, tau_prev) = prev.expect("checked above");
                e_hat_rec = propagate_error_recursion(
                    &e_hat_rec,
                    u_prev,
                    g_prev,
                    tau_prev,
                    k,
                    sys,
                    &e_check_ring,
                    &w_ring,
                )?;
            }
            let (mismatch_gap, error_gap) =
                audit_step(k, run_index, enc, &decoder, &channel, &x, &e_hat_rec)?;
            max_mismatch_gap = max_mismatch_gap.max(mismatch_gap);
            max_error_gap = max_error_gap.max(error_gap);

            // (4) Decoder issues a_k.
            let a = decoder.control_input(&self.gains)?;

            // (5) Encoder decides; the channel carries the packet.
            let tau_at_decision = channel.link().clone();
            let outcome = self.policy.decide(
                enc,
                &self.gains,
                cfg,
                self.dp_tables.as_deref(),
                &mut rng_policy,
            )?;
            if outcome.decision == Decision::Rtx
                && (tau_at_decision.tau == 0 || tau_at_decision.omega > cfg.channel.omega_max)
            {
                return Err(Error::Protocol(format!(
                    "run {run_index}: RTX decided in a forced state at k={k}"
                )));
            }
            // ε is defined against τ_k; capture it before the
            // acknowledgment rolls the link view forward.
            let epsilon_norm = if record_steps && tau_at_decision.tau >= 1 {
                Some(enc.compute_epsilon(sys)?.norm())
            } else {
                None
            };
            let payload = match outcome.decision {
                Decision::Tx => Some(x_check.clone()),
                Decision::Rtx => None,
            };
            let Transmission {
                output: z_next,
                gamma,
                lambda_used,
            } = channel.transmit(
                &cfg.channel,
                outcome.decision,
                payload,
                &mut rng_eras,
                &mut rng_fade,
            )?;
            enc.acknowledge(outcome.decision, gamma, channel.link().fading_state);

            // Bookkeeping.
            let stage_cost = (quad_form(cfg.cost.q_at(k), &x) + quad_form(cfg.cost.r_at(k), &a))
                / (horizon + 1) as f64;
            upsilon += stage_cost;
            match outcome.decision {
                Decision::Tx => totals.tx += 1,
                Decision::Rtx => totals.rtx += 1,
            }
            match outcome.reason {
                DecisionReason::Tau0 => totals.forced_tau0 += 1,
                DecisionReason::OmegaCap => totals.forced_omega_cap += 1,
                DecisionReason::Threshold => totals.threshold_decisions += 1,
            }
            totals.packet_losses += (!gamma) as usize;
            totals.expected_erasures += lambda_used;
            totals.erasure_variance += lambda_used * (1.0 - lambda_used);

            if record_steps {
                steps.push(StepRecord {
                    k,
                    x: x.iter().copied().collect(),
                    y: y.iter().copied().collect(),
                    u: outcome.decision,
                    gamma,
                    tau: tau_at_decision.tau,
                    omega: tau_at_decision.omega,
                    fading_state: tau_at_decision.fading_state,
                    lambda_used,
                    z_delivered,
                    z_origin,
                    x_hat: decoder.x_hat().iter().copied().collect(),
                    a: a.iter().copied().collect(),
                    stage_cost,
                    omega_stat: outcome.omega_stat,
                    delta: outcome.delta,
                    e_tilde_norm: enc.e_tilde().norm(),
                    epsilon_norm,
                    e_hat_norm: (&x - decoder.x_hat()).norm(),
                    forced_reason: outcome.reason,
                });
            }

            prev = Some((outcome.decision, gamma, tau_at_decision.tau));
            z = z_next;

            // (6) The plant advances.
            let w_k = sample_gaussian(&zero_n, self.sqrt_w.at(k), &mut rng_proc);
            w_ring.push_back((k, w_k.clone()));
            while w_ring.len() > ring_cap {
                w_ring.pop_front();
            }
            x = sys.a_at(k) * &x + sys.b_at(k) * &a + w_k;
            a_prev = a;
        }

        let terminal_cost = quad_form(cfg.cost.q_at(horizon + 1), &x) / (horizon + 1) as f64;
        upsilon += terminal_cost;

        if totals.tx + totals.rtx != horizon + 1 {
            return Err(Error::Protocol(format!(
                "run {run_index}: decision count {} != N+1 = {}",
                totals.tx + totals.rtx,
                horizon + 1
            )));
        }

        let (z_terminal_delivered, z_terminal_origin) = match &z {
            ChannelOutput::Delivered(pl) => (true, Some(pl.origin)),
            ChannelOutput::Erased => (false, None),
        };

        Ok(RunTrace {
            run_index,
            steps,
            x_terminal: x.iter().copied().collect(),
            terminal_cost,
            z_terminal_delivered,
            z_terminal_origin,
            totals,
            upsilon,
            audit_max_mismatch_gap: max_mismatch_gap,
            audit_max_error_gap: max_error_gap,
        })
    }

    /// Monte Carlo estimate of the objective over `cfg.runs` independent
    /// episodes. Deterministic given (scenario, seed), independent of the
    /// rayon worker count.
    pub fn monte_carlo(&self) -> Result<McSummary> {
        let runs = self.cfg.runs;
        let per_run: Vec<(f64, Totals)> = (0..runs as u64)
            .into_par_iter()
            .map(|i| {
                self.run_episode_internal(i, false)
                    .map(|t| (t.upsilon, t.totals))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(summarize(&self.cfg, per_run))
    }
}

#[allow(clippy::too_many_arguments)]
fn propagate_error_recursion(
    e_hat_prev: &DVector<f64>,
    u_prev: Decision,
    gamma_prev: bool,
    tau_prev: usize,
    k: usize,
    sys: &SystemModel,
    e_check_ring: &VecDeque<(usize, DVector<f64>)>,
    w_ring: &VecDeque<(usize, DVector<f64>)>,
) -> Result<DVector<f64>> {
    let lookup = |ring: &VecDeque<(usize, DVector<f64>)>, t: usize, what: &str| {
        ring.iter()
            .rev()
            .find(|(time, _)| *time == t)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::Protocol(format!("{what} ring underflow at t={t}, k={k}")))
    };
    Ok(match (u_prev, gamma_prev) {
        // Delivery of the fresh estimate: the decoder inherits the
        // encoder's error propagated one step.
        (Decision::Tx, true) => {
            sys.a_at(k - 1) * lookup(e_check_ring, k - 1, "encoder error")?
                + lookup(w_ring, k - 1, "process noise")?
        }
        // Delivery of the stale estimate: the encoder error at the origin
        // time propagates through the whole gap, plus the accumulated
        // process noise.
        (Decision::Rtx, true) => {
            let n = sys.state_dim();
            let origin = k - 1 - tau_prev;
            let mut prod = DMatrix::identity(n, n);
            let mut acc = DVector::zeros(n);
            for t in 0..=tau_prev {
                if t > 0 {
                    prod = &prod * sys.a_at(k - t);
                }
                acc += &prod * lookup(w_ring, k - t - 1, "process noise")?;
            }
            let full = &prod * sys.a_at(origin);
            acc + full * lookup(e_check_ring, origin, "encoder error")?
        }
        // Erasure: the decoder error coasts through the dynamics.
        (_, false) => sys.a_at(k - 1) * e_hat_prev + lookup(w_ring, k - 1, "process noise")?,
    })
}

/// Returns the absolute gaps (mismatch recursion vs definition, error
/// recursion vs definition) so callers can track run-level maxima.
fn audit_step(
    k: usize,
    run_index: u64,
    enc: &EncoderState,
    decoder: &DecoderState,
    channel: &Channel,
    x: &DVector<f64>,
    e_hat_rec: &DVector<f64>,
) -> Result<(f64, f64)> {
    let x_check = enc.filter.x_check();
    let x_hat = decoder.x_hat();
    let scale = 1.0_f64.max(x.amax()).max(x_hat.amax()).max(x_check.amax());
    let tol = AUDIT_TOL * scale;

    let mismatch_def = x_check - x_hat;
    let mismatch_gap = (enc.e_tilde() - &mismatch_def).amax();
    if mismatch_gap > tol {
        return Err(Error::Protocol(format!(
            "run {run_index}, k={k}: mismatch recursion disagrees with \
             definition by {mismatch_gap:.3e} (tol {tol:.3e})"
        )));
    }
    let e_hat_def = x - x_hat;
    let e_hat_gap = (e_hat_rec - &e_hat_def).amax();
    if e_hat_gap > tol {
        return Err(Error::Protocol(format!(
            "run {run_index}, k={k}: decoder-error recursion disagrees with \
             definition by {e_hat_gap:.3e} (tol {tol:.3e})"
        )));
    }
    let link = channel.link();
    if link.tau != enc.link_view.tau || link.omega != enc.link_view.omega {
        return Err(Error::Protocol(format!(
            "run {run_index}, k={k}: channel tau/omega ({}, {}) desynchronized \
             from encoder view ({}, {})",
            link.tau, link.omega, enc.link_view.tau, enc.link_view.omega
        )));
    }
    if link.tau != link.omega {
        return Err(Error::Protocol(format!(
            "run {run_index}, k={k}: tau {} != omega {}",
            link.tau, link.omega
        )));
    }
    Ok((mismatch_gap, e_hat_gap))
}

fn quad_form(weight: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (v.transpose() * weight * v)[(0, 0)]
}

// ---------------------------------------------------------------------------
// Free-function entry points
// ---------------------------------------------------------------------------

/// Run one episode of the scenario (precomputing schedules internally;
/// build a [`Simulator`] once when running many).
pub fn run_episode(cfg: &ScenarioConfig, run_index: u64) -> Result<RunTrace> {
    Simulator::new(cfg)?.run_episode(run_index)
}

/// Realized objective of a recorded episode, recomputed from the states
/// and controls: (Σ_k xᵀQx + Σ_k aᵀRa)/(N+1) including the terminal state.
pub fn evaluate_loss(trace: &RunTrace, cost: &CostSpec) -> f64 {
    let horizon = trace.steps.len() - 1;
    let mut total = 0.0;
    for step in &trace.steps {
        let x = DVector::from_vec(step.x.clone());
        let a = DVector::from_vec(step.a.clone());
        total += quad_form(cost.q_at(step.k), &x) + quad_form(cost.r_at(step.k), &a);
    }
    let x_term = DVector::from_vec(trace.x_terminal.clone());
    total += quad_form(cost.q_at(horizon + 1), &x_term);
    total / (horizon + 1) as f64
}

/// Monte Carlo estimate of the objective for the scenario's policy.
pub fn monte_carlo(cfg: &ScenarioConfig) -> Result<McSummary> {
    Simulator::new(cfg)?.monte_carlo()
}

/// Construct a baseline (or optimal) policy object with the same decision
/// interface the closed loop uses.
pub fn baseline_policy(policy: Policy) -> Result<PolicyRuntime> {
    PolicyRuntime::from_policy(policy)
}

/// Closed-form objective for a perfect channel (λ ≡ 0), assembled from the
/// Riccati and filter schedules:
/// (m₀ᵀS₀m₀ + tr(S₀M₀) + Σ_k tr(S_{k+1}W_k) + tr(Γ₀M₀) + Σ_{k≥1} tr(Γ_kM_k)) / (N+1).
///
/// Under an always-delivering channel the decoder error at k ≥ 1 has
/// covariance M_k (the one-step-stale filter covariance), which turns the
/// exact loss decomposition into a pure trace formula.
pub fn analytic_loss_perfect_channel(cfg: &ScenarioConfig) -> Result<f64> {
    let gains = riccati_backward(&cfg.system, &cfg.cost, cfg.horizon)?;
    let cov = CovarianceSchedule::compute(&cfg.system, cfg.horizon)?;
    let sys = &cfg.system;
    let horizon = cfg.horizon;

    let s0 = gains.s(0);
    let mut total = quad_form(s0, &sys.m0) + (s0 * &sys.m0_cov).trace();
    for k in 0..=horizon {
        total += (gains.s(k + 1) * sys.w_at(k)).trace();
    }
    total += (gains.gamma(0) * &sys.m0_cov).trace();
    for k in 1..=horizon {
        total += (gains.gamma(k) * cov.m(k)).trace();
    }
    Ok(total / (horizon + 1) as f64)
}

// ---------------------------------------------------------------------------
// Monte Carlo summaries
// ---------------------------------------------------------------------------

/// Distribution quantiles of the per-run objective.
#[derive(Debug, Clone, Serialize)]
pub struct Quantiles {
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

/// Aggregated Monte Carlo output for one policy.
#[derive(Debug, Clone, Serialize)]
pub struct McSummary {
    pub policy: String,
    pub runs: usize,
    pub seed: u64,
    pub horizon: usize,
    pub upsilon_mean: f64,
    pub upsilon_se: f64,
    pub upsilon_min: f64,
    pub upsilon_max: f64,
    pub quantiles: Quantiles,
    pub totals: Totals,
    /// Per-run objective values (cleared before export unless requested).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_run_upsilon: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn summarize(cfg: &ScenarioConfig, per_run: Vec<(f64, Totals)>) -> McSummary {
    let runs = per_run.len();
    let upsilons: Vec<f64> = per_run.iter().map(|(u, _)| *u).collect();
    let mean = upsilons.iter().sum::<f64>() / runs as f64;
    let se = if runs > 1 {
        let var = upsilons.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        (var / runs as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = upsilons.clone();
    sorted.sort_by(f64::total_cmp);

    let mut totals = Totals::default();
    for (_, t) in &per_run {
        totals.tx += t.tx;
        totals.rtx += t.rtx;
        totals.packet_losses += t.packet_losses;
        totals.forced_tau0 += t.forced_tau0;
        totals.forced_omega_cap += t.forced_omega_cap;
        totals.threshold_decisions += t.threshold_decisions;
        totals.expected_erasures += t.expected_erasures;
        totals.erasure_variance += t.erasure_variance;
    }

    McSummary {
        policy: cfg.policy.to_string(),
        runs,
        seed: cfg.seed,
        horizon: cfg.horizon,
        upsilon_mean: mean,
        upsilon_se: se,
        upsilon_min: sorted[0],
        upsilon_max: sorted[sorted.len() - 1],
        quantiles: Quantiles {
            q05: quantile(&sorted, 0.05),
            q25: quantile(&sorted, 0.25),
            q50: quantile(&sorted, 0.50),
            q75: quantile(&sorted, 0.75),
            q95: quantile(&sorted, 0.95),
        },
        totals,
        per_run_upsilon: upsilons,
    }
}

/// Paired difference of two policies run under common random numbers.
#[derive(Debug, Clone, Serialize)]
pub struct PairedDiff {
    pub policy_a: String,
    pub policy_b: String,
    /// mean(Υ_a − Υ_b) over paired runs.
    pub mean_diff: f64,
    /// Standard error of the paired differences.
    pub se_diff: f64,
}

/// Evaluate several policies on identical noise/erasure draws and report
/// each policy's summary plus all pairwise paired differences.
pub fn monte_carlo_compare(
    cfg: &ScenarioConfig,
    policies: &[Policy],
) -> Result<(Vec<McSummary>, Vec<PairedDiff>)> {
    let mut summaries = Vec::with_capacity(policies.len());
    for &policy in policies {
        let sim = Simulator::with_policy(cfg, policy)?;
        summaries.push(sim.monte_carlo()?);
    }
    let mut pairs = Vec::new();
    for i in 0..summaries.len() {
        for j in i + 1..summaries.len() {
            let a = &summaries[i].per_run_upsilon;
            let b = &summaries[j].per_run_upsilon;
            let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let se = if diffs.len() > 1 {
                let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>()
                    / (diffs.len() - 1) as f64;
                (var / diffs.len() as f64).sqrt()
            } else {
                0.0
            };
            pairs.push(PairedDiff {
                policy_a: summaries[i].policy.clone(),
                policy_b: summaries[j].policy.clone(),
                mean_diff: mean,
                se_diff: se,
            });
        }
    }
    Ok((summaries, pairs))
}

// ---------------------------------------------------------------------------
// File emission
// ---------------------------------------------------------------------------

/// Provenance header embedded in every emitted file.
#[derive(Debug, Clone, Serialize)]
pub struct FileMeta {
    pub artifact_version: String,
    pub scenario_sha256: String,
    pub seed: u64,
    pub policy: String,
    pub horizon: usize,
    pub runs: usize,
}

impl FileMeta {
    pub fn for_config(cfg: &ScenarioConfig) -> FileMeta {
        FileMeta {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            scenario_sha256: cfg.sha256(),
            seed: cfg.seed,
            policy: cfg.policy.to_string(),
            horizon: cfg.horizon,
            runs: cfg.runs,
        }
    }

    /// `# key=value` comment lines prepended to every CSV emission.
    pub fn csv_header(&self) -> String {
        format!(
            "# artifact_version={}\n# scenario_sha256={}\n# seed={}\n# policy={}\n# horizon={}\n# runs={}\n",
            self.artifact_version, self.scenario_sha256, self.seed, self.policy,
            self.horizon, self.runs
        )
    }
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

/// One row per step (k = 0..N) plus a terminal row carrying x_{N+1} and its
/// cost share.
pub fn write_trace_csv<W: std::io::Write>(
    trace: &RunTrace,
    meta: &FileMeta,
    mut out: W,
) -> std::io::Result<()> {
    out.write_all(meta.csv_header().as_bytes())?;
    let n = trace.x_terminal.len();
    let p_dim = trace.steps.first().map_or(0, |s| s.y.len());
    let m_dim = trace.steps.first().map_or(0, |s| s.a.len());

    let mut header = String::from("k");
    for i in 0..n {
        header.push_str(&format!(",x{i}"));
    }
    for i in 0..p_dim {
        header.push_str(&format!(",y{i}"));
    }
    header.push_str(",u,gamma,tau,omega,fading_state,lambda_used,z_status,z_origin");
    for i in 0..m_dim {
        header.push_str(&format!(",a{i}"));
    }
    header.push_str(
        ",stage_cost,omega_stat,delta,e_tilde_norm,epsilon_norm,e_hat_norm,forced_reason",
    );
    writeln!(out, "{header}")?;

    for s in &trace.steps {
        let mut row = format!("{}", s.k);
        for v in &s.x {
            row.push_str(&format!(",{v}"));
        }
        for v in &s.y {
            row.push_str(&format!(",{v}"));
        }
        row.push_str(&format!(
            ",{},{},{},{},{},{},{},{}",
            s.u,
            s.gamma as u8,
            s.tau,
            s.omega,
            s.fading_state,
            s.lambda_used,
            if s.z_delivered { "delivered" } else { "erased" },
            fmt_opt(&s.z_origin),
        ));
        for v in &s.a {
            row.push_str(&format!(",{v}"));
        }
        row.push_str(&format!(
            ",{},{},{},{},{},{},{}",
            s.stage_cost,
            fmt_opt(&s.omega_stat),
            fmt_opt(&s.delta),
            s.e_tilde_norm,
            fmt_opt(&s.epsilon_norm),
            s.e_hat_norm,
            s.forced_reason,
        ));
        writeln!(out, "{row}")?;
    }

    // Terminal row: state, the logged z_{N+1} delivery, and terminal cost.
    let k_term = trace.steps.len();
    let mut row = format!("{k_term}");
    for v in &trace.x_terminal {
        row.push_str(&format!(",{v}"));
    }
    for _ in 0..p_dim {
        row.push(',');
    }
    // Six empty decision fields (u..lambda_used), then the z_{N+1} status.
    row.push_str(&format!(
        ",,,,,,,{},{}",
        if trace.z_terminal_delivered {
            "delivered"
        } else {
            "erased"
        },
        fmt_opt(&trace.z_terminal_origin)
    ));
    for _ in 0..m_dim {
        row.push(',');
    }
    row.push_str(&format!(",{},,,,,,", trace.terminal_cost));
    writeln!(out, "{row}")?;
    Ok(())
}

/// Trace as a single JSON document with the provenance header inline.
pub fn write_trace_json<W: std::io::Write>(
    trace: &RunTrace,
    meta: &FileMeta,
    mut out: W,
) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        meta: &'a FileMeta,
        trace: &'a RunTrace,
    }
    let doc = Doc { meta, trace };
    out.write_all(
        serde_json::to_string_pretty(&doc)
            .expect("serializable")
            .as_bytes(),
    )?;
    out.write_all(b"\n")
}

/// Summaries (and paired differences, when comparing) as a JSON document.
pub fn write_summary_json<W: std::io::Write>(
    summaries: &[McSummary],
    pairs: &[PairedDiff],
    meta: &FileMeta,
    mut out: W,
) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        meta: &'a FileMeta,
        policies: &'a [McSummary],
        paired_differences: &'a [PairedDiff],
    }
    let doc = Doc {
        meta,
        policies: summaries,
        paired_differences: pairs,
    };
    out.write_all(
        serde_json::to_string_pretty(&doc)
            .expect("serializable")
            .as_bytes(),
    )?;
    out.write_all(b"\n")
}

/// Summaries as CSV, one row per policy, paired differences appended as
/// pseudo-rows.
pub fn write_summary_csv<W: std::io::Write>(
    summaries: &[McSummary],
    pairs: &[PairedDiff],
    meta: &FileMeta,
    mut out: W,
) -> std::io::Result<()> {
    out.write_all(meta.csv_header().as_bytes())?;
    writeln!(
        out,
        "policy,runs,seed,horizon,upsilon_mean,upsilon_se,upsilon_min,upsilon_max,\
         q05,q25,q50,q75,q95,tx,rtx,packet_losses,forced_tau0,forced_omega_cap,\
         threshold_decisions,expected_erasures"
    )?;
    for s in summaries {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.policy,
            s.runs,
            s.seed,
            s.horizon,
            s.upsilon_mean,
            s.upsilon_se,
            s.upsilon_min,
            s.upsilon_max,
            s.quantiles.q05,
            s.quantiles.q25,
            s.quantiles.q50,
            s.quantiles.q75,
            s.quantiles.q95,
            s.totals.tx,
            s.totals.rtx,
            s.totals.packet_losses,
            s.totals.forced_tau0,
            s.totals.forced_omega_cap,
            s.totals.threshold_decisions,
            s.totals.expected_erasures,
        )?;
    }
    for p in pairs {
        writeln!(
            out,
            "diff({}-{}),,,,{},{},,,,,,,,,,,,,,",
            p.policy_a, p.policy_b, p.mean_diff, p.se_diff
        )?;
    }
    Ok(())
}

/// S and L schedules as CSV, one row per t with matrices flattened
/// row-major.
pub fn write_gains_csv<W: std::io::Write>(
    gains: &GainSchedule,
    cfg: &ScenarioConfig,
    meta: &FileMeta,
    mut out: W,
) -> std::io::Result<()> {
    out.write_all(meta.csv_header().as_bytes())?;
    let n = cfg.state_dim();
    let m = cfg.input_dim();
    let mut header = String::from("t");
    for i in 0..n {
        for j in 0..n {
            header.push_str(&format!(",s_{i}_{j}"));
        }
    }
    for i in 0..m {
        for j in 0..n {
            header.push_str(&format!(",l_{i}_{j}"));
        }
    }
    writeln!(out, "{header}")?;
    for t in 0..=cfg.horizon + 1 {
        let mut row = format!("{t}");
        let s = gains.s(t);
        for i in 0..n {
            for j in 0..n {
                row.push_str(&format!(",{}", s[(i, j)]));
            }
        }
        if t <= cfg.horizon {
            let l = gains.control_gain(t).expect("within horizon");
            for i in 0..m {
                for j in 0..n {
                    row.push_str(&format!(",{}", l[(i, j)]));
                }
            }
        } else {
            for _ in 0..m * n {
                row.push(',');
            }
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}
