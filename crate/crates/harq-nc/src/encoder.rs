//! The switching decision maker.
//!
//! The encoder tracks how far the decoder's estimate has drifted from its
//! own — the estimation mismatch ẽ_k — plus a short window of recent
//! innovations, and turns them into a per-step TX/RTX decision:
//!
//! - TX is forced when nothing is pending (τ = 0) or the pending
//!   measurement has exhausted its retransmission budget (ω > ω_max);
//! - otherwise the decision statistic
//!   Ω_k = (λ(ω)−λ(0))·(Aẽ)ᵀΓ_{k+1}(Aẽ) + (1−λ(ω))·εᵀΓ_{k+1}ε + Δ_k
//!   selects TX when Ω_k ≥ 0 and RTX when Ω_k < 0.
//!
//! Δ_k is the continuation-value residual: zero under the default
//! one-step lookahead, or evaluated on the DP oracle's value grids for
//! scalar scenarios.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::channel::{Decision, LinkState};
use crate::dp_oracle::ValueTables;
use crate::estimator::{kf_initialize, kf_step, CovarianceSchedule, FilterState};
use crate::lqr::GainSchedule;
use crate::model::{ChannelSpec, SystemModel};
use crate::{Error, Result};

/// How the continuation-value residual Δ_k is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeltaMode {
    /// One-step lookahead: Δ_k = 0.
    #[default]
    Zero,
    /// Exact residual from the DP oracle (scalar systems only).
    Exact,
}

impl std::str::FromStr for DeltaMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "zero" => Ok(DeltaMode::Zero),
            "exact" => Ok(DeltaMode::Exact),
            other => Err(format!("unknown delta mode `{other}` (zero|exact)")),
        }
    }
}

/// Why a decision came out the way it did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionReason {
    /// Nothing pending: TX forced.
    Tau0,
    /// Retransmission budget exhausted: TX forced.
    OmegaCap,
    /// Free decision by the threshold statistic (or a baseline's choice).
    Threshold,
}

impl std::fmt::Display for DecisionReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecisionReason::Tau0 => write!(f, "tau0"),
            DecisionReason::OmegaCap => write!(f, "omega_cap"),
            DecisionReason::Threshold => write!(f, "threshold"),
        }
    }
}

/// A decision plus its diagnostics and the payload it implies.
#[derive(Debug, Clone)]
pub struct DecisionOutcome {
    pub decision: Decision,
    pub reason: DecisionReason,
    /// Ω_k, present when the threshold was actually evaluated.
    pub omega_stat: Option<f64>,
    /// Δ_k used inside Ω_k, when evaluated.
    pub delta: Option<f64>,
    /// Origin time of the payload this decision puts on the channel.
    pub payload_origin: usize,
}

/// Encoder-side sufficient statistic: filter state, estimation mismatch,
/// innovation window, and the protocol state reconstructed from
/// acknowledgments alone (so it can be cross-checked against the channel).
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub filter: FilterState,
    e_tilde: DVector<f64>,
    /// Last ω_max+1 innovations as (time, ν_t), oldest first.
    window: VecDeque<(usize, DVector<f64>)>,
    pub link_view: LinkState,
    pub delta_mode: DeltaMode,
    window_cap: usize,
}

impl EncoderState {
    /// Start at k = 0 from the first measurement: ẽ_0 = K_0 ν_0.
    pub fn new(
        sys: &SystemModel,
        spec: &ChannelSpec,
        y0: &DVector<f64>,
        cov: std::sync::Arc<CovarianceSchedule>,
        delta_mode: DeltaMode,
    ) -> Self {
        let filter = kf_initialize(sys, y0, cov);
        let e_tilde = filter.k_gain() * filter.nu();
        let mut window = VecDeque::new();
        window.push_back((0, filter.nu().clone()));
        EncoderState {
            filter,
            e_tilde,
            window,
            link_view: LinkState::new(spec),
            delta_mode,
            window_cap: spec.omega_max + 1,
        }
    }

    /// Estimation mismatch ẽ_k.
    pub fn e_tilde(&self) -> &DVector<f64> {
        &self.e_tilde
    }

    /// Innovations retained for the retransmission branches, oldest first.
    pub fn window(&self) -> impl Iterator<Item = (usize, &DVector<f64>)> {
        self.window.iter().map(|(t, nu)| (*t, nu))
    }

    /// Advance the Kalman filter to the next measurement and retain the new
    /// innovation.
    pub fn advance_filter(&mut self, a_prev: &DVector<f64>, y: &DVector<f64>, sys: &SystemModel) {
        self.filter = kf_step(&self.filter, a_prev, y, sys);
        self.window
            .push_back((self.filter.k(), self.filter.nu().clone()));
        while self.window.len() > self.window_cap {
            self.window.pop_front();
        }
    }

    /// Record the acknowledgment of step k's transmission and advance the
    /// encoder's own protocol view.
    pub fn acknowledge(&mut self, u: Decision, gamma: bool, fading_next: usize) {
        self.link_view = self.link_view.advance(u, gamma, fading_next);
    }

    fn nu_at(&self, t: usize) -> Result<&DVector<f64>> {
        self.window
            .iter()
            .rev()
            .find(|(time, _)| *time == t)
            .map(|(_, nu)| nu)
            .ok_or_else(|| {
                Error::Protocol(format!(
                    "innovation window underflow: nu_{t} not retained at k={}",
                    self.filter.k()
                ))
            })
    }

    /// Mismatch recursion, driven by the acknowledged outcome of step k−1:
    ///
    /// - TX success:  ẽ_k = K_k ν_k
    /// - RTX success: ẽ_k = Σ_{t=0}^{τ_{k−1}} (Π_{t'=1}^{t} A_{k−t'}) K_{k−t} ν_{k−t}
    /// - erasure:     ẽ_k = A_{k−1} ẽ_{k−1} + K_k ν_k
    ///
    /// `tau_prev` is the pre-ack τ_{k−1}. The filter must already sit at k.
    pub fn update_mismatch(
        &mut self,
        u_prev: Decision,
        gamma_prev: bool,
        tau_prev: usize,
        sys: &SystemModel,
    ) -> Result<&DVector<f64>> {
        let k = self.filter.k();
        let cov = std::sync::Arc::clone(self.filter.covariances());
        let kn = |st: &Self, t: usize| -> Result<DVector<f64>> { Ok(cov.k_gain(t) * st.nu_at(t)?) };

        self.e_tilde = match (u_prev, gamma_prev) {
            (Decision::Tx, true) => kn(self, k)?,
            (Decision::Rtx, true) => {
                let n = sys.state_dim();
                let mut acc = DVector::zeros(n);
                let mut prod = DMatrix::identity(n, n);
                for t in 0..=tau_prev {
                    if t > 0 {
                        prod = &prod * sys.a_at(k - t);
                    }
                    acc += &prod * kn(self, k - t)?;
                }
                acc
            }
            (_, false) => sys.a_at(k - 1) * &self.e_tilde + kn(self, k)?,
        };
        Ok(&self.e_tilde)
    }

    /// Propagated innovation sum entering the RTX branch of the decision:
    /// ε_k = Σ_{t=0}^{τ_k−1} (Π_{t'=0}^{t} A_{k−t'}) K_{k−t} ν_{k−t}.
    /// The leading product includes A_k. Only defined when τ_k ≥ 1.
    pub fn compute_epsilon(&self, sys: &SystemModel) -> Result<DVector<f64>> {
        let tau = self.link_view.tau;
        if tau == 0 {
            return Err(Error::Protocol(
                "epsilon requested with tau = 0 (no RTX branch to evaluate)".into(),
            ));
        }
        let k = self.filter.k();
        let n = sys.state_dim();
        let mut acc = DVector::zeros(n);
        let mut prod = sys.a_at(k).clone();
        for t in 0..tau {
            if t > 0 {
                prod = &prod * sys.a_at(k - t);
            }
            let kn = self.filter.covariances().k_gain(k - t) * self.nu_at(k - t)?;
            acc += &prod * kn;
        }
        Ok(acc)
    }

    /// The decision statistic
    /// Ω_k = (λ(ω)−λ(0))·(Aẽ)ᵀΓ_{k+1}(Aẽ) + (1−λ(ω))·εᵀΓ_{k+1}ε + Δ_k.
    /// Callable only where the decision is free (τ ≥ 1, ω ≤ ω_max).
    pub fn compute_omega_gap(
        &self,
        sched: &GainSchedule,
        spec: &ChannelSpec,
        sys: &SystemModel,
        delta: f64,
    ) -> Result<f64> {
        let tau = self.link_view.tau;
        if tau == 0 || self.link_view.omega > spec.omega_max {
            return Err(Error::Protocol(format!(
                "omega gap requested in a forced state (tau={tau}, omega={})",
                self.link_view.omega
            )));
        }
        let k = self.filter.k();
        let fading = self.link_view.fading_state;
        let lam0 = spec.lambda(fading, 0);
        let lam_w = spec.lambda(fading, self.link_view.omega);
        let gamma_next = sched.gamma(k + 1);

        let ae = sys.a_at(k) * &self.e_tilde;
        let eps = self.compute_epsilon(sys)?;
        let drift = (ae.transpose() * gamma_next * &ae)[(0, 0)];
        let resync = (eps.transpose() * gamma_next * &eps)[(0, 0)];
        Ok((lam_w - lam0) * drift + (1.0 - lam_w) * resync + delta)
    }

    /// Evaluate Δ_k per the configured mode.
    pub fn delta(&self, spec: &ChannelSpec, tables: Option<&ValueTables>) -> Result<f64> {
        match self.delta_mode {
            DeltaMode::Zero => Ok(0.0),
            DeltaMode::Exact => {
                let tables = tables.ok_or_else(|| {
                    Error::Unsupported(
                        "exact delta mode requires precomputed DP value tables".into(),
                    )
                })?;
                let window: Vec<f64> = (0..self.link_view.tau)
                    .map(|t| self.nu_at(self.filter.k() - t).map(|nu| nu[0]))
                    .collect::<Result<_>>()?;
                crate::dp_oracle::exact_delta(
                    tables,
                    self.filter.k(),
                    self.e_tilde[0],
                    &window,
                    self.link_view.tau,
                    self.link_view.fading_state,
                    spec,
                )
            }
        }
    }

    /// The switching rule: TX iff ω_k > ω_max ∨ τ_k = 0 ∨ Ω_k ≥ 0, with the
    /// fresh estimate x̌_k as TX payload and the channel-held x̌_{k−τ_k}
    /// implied on RTX. Ties (Ω_k = 0) transmit.
    pub fn decide(
        &self,
        sched: &GainSchedule,
        spec: &ChannelSpec,
        sys: &SystemModel,
        tables: Option<&ValueTables>,
    ) -> Result<DecisionOutcome> {
        let k = self.filter.k();
        let tau = self.link_view.tau;
        if tau == 0 {
            return Ok(DecisionOutcome {
                decision: Decision::Tx,
                reason: DecisionReason::Tau0,
                omega_stat: None,
                delta: None,
                payload_origin: k,
            });
        }
        if self.link_view.omega > spec.omega_max {
            return Ok(DecisionOutcome {
                decision: Decision::Tx,
                reason: DecisionReason::OmegaCap,
                omega_stat: None,
                delta: None,
                payload_origin: k,
            });
        }
        let delta = self.delta(spec, tables)?;
        let omega_stat = self.compute_omega_gap(sched, spec, sys, delta)?;
        let decision = if omega_stat >= 0.0 {
            Decision::Tx
        } else {
            Decision::Rtx
        };
        Ok(DecisionOutcome {
            decision,
            reason: DecisionReason::Threshold,
            omega_stat: Some(omega_stat),
            delta: Some(delta),
            payload_origin: if decision == Decision::Tx { k } else { k - tau },
        })
    }
}
