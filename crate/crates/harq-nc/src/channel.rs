//! Packet-erasure channel with retransmission bookkeeping.
//!
//! Each step carries either the encoder's fresh estimate (TX) or the
//! channel-held previously failed one (RTX). Delivery is Bernoulli with an
//! error rate that depends on the fading state and on how many times the
//! pending payload has already been attempted. Outcomes are acknowledged
//! ideally, one step later.
//!
//! The channel object itself stores the pending failed payload and serves
//! it on RTX, so a desynchronized encoder cannot retransmit the wrong
//! estimate by construction.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::ChannelSpec;
use crate::{Error, Result};

/// The encoder's per-step choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Tx,
    Rtx,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Decision::Tx => write!(f, "TX"),
            Decision::Rtx => write!(f, "RTX"),
        }
    }
}

/// A state estimate in flight: the vector and the step it was produced at.
#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    pub data: DVector<f64>,
    pub origin: usize,
}

/// Channel output z_{k+1}: the payload on success, the erasure symbol
/// otherwise. A payload is present iff the packet was delivered.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelOutput {
    Delivered(Payload),
    Erased,
}

impl ChannelOutput {
    pub fn is_delivered(&self) -> bool {
        matches!(self, ChannelOutput::Delivered(_))
    }
}

/// Protocol state visible on both sides of the link at time k.
///
/// `tau` counts the steps since the last TX decision when the preceding
/// attempt failed; `omega` is the attempt count of the pending measurement
/// and equals `tau` at all times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkState {
    pub tau: usize,
    pub omega: usize,
    pub fading_state: usize,
    pub last_u: Option<Decision>,
    pub last_gamma: Option<bool>,
    pub k: usize,
}

impl LinkState {
    pub fn new(spec: &ChannelSpec) -> Self {
        LinkState {
            tau: 0,
            omega: 0,
            fading_state: spec.initial_state,
            last_u: None,
            last_gamma: None,
            k: 0,
        }
    }

    /// Advance the protocol counters one step given the acknowledged
    /// outcome of step k:
    /// TX failure resets the clock to 1, RTX failure extends it, any
    /// success clears it.
    pub fn advance(&self, u: Decision, gamma: bool, next_fading: usize) -> LinkState {
        let tau = match (u, gamma) {
            (Decision::Tx, false) => 1,
            (Decision::Rtx, false) => self.tau + 1,
            (_, true) => 0,
        };
        LinkState {
            tau,
            omega: tau,
            fading_state: next_fading,
            last_u: Some(u),
            last_gamma: Some(gamma),
            k: self.k + 1,
        }
    }
}

/// Packet error rate for decision `u` in the link's current state:
/// λ(0) for a fresh transmission, λ(ω_k) for a retransmission.
/// Retransmitting with nothing pending (τ = 0) is a caller error.
pub fn error_rate(spec: &ChannelSpec, link: &LinkState, u: Decision) -> Result<f64> {
    match u {
        Decision::Tx => Ok(spec.lambda(link.fading_state, 0)),
        Decision::Rtx => {
            if link.tau == 0 {
                return Err(Error::Protocol(
                    "RTX requested with tau = 0 (no pending measurement)".into(),
                ));
            }
            Ok(spec.lambda(link.fading_state, link.omega))
        }
    }
}

/// One Markov transition of the fading chain. Always consumes exactly one
/// uniform draw so erasure/fading streams stay aligned across scenarios.
pub fn step_fading(spec: &ChannelSpec, state: usize, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let row = spec.transition.row(state);
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    spec.num_states() - 1
}

/// Result of one channel use at step k: the output z_{k+1}, the sampled
/// acknowledgment γ_k, and the error rate that governed the draw.
#[derive(Debug, Clone)]
pub struct Transmission {
    pub output: ChannelOutput,
    pub gamma: bool,
    pub lambda_used: f64,
}

/// The lossy link: protocol state plus the held pending payload.
#[derive(Debug, Clone)]
pub struct Channel {
    link: LinkState,
    pending: Option<Payload>,
}

impl Channel {
    pub fn new(spec: &ChannelSpec) -> Self {
        Channel {
            link: LinkState::new(spec),
            pending: None,
        }
    }

    pub fn link(&self) -> &LinkState {
        &self.link
    }

    /// Carry one packet across the channel at step k.
    ///
    /// On TX the caller supplies the fresh estimate x̌_k; on RTX the channel
    /// serves its held payload x̌_{k−τ_k}. The outcome updates τ/ω per the
    /// protocol recursion and advances the fading chain one step.
    pub fn transmit(
        &mut self,
        spec: &ChannelSpec,
        u: Decision,
        new_payload: Option<DVector<f64>>,
        erasure_rng: &mut ChaCha8Rng,
        fading_rng: &mut ChaCha8Rng,
    ) -> Result<Transmission> {
        let lambda_used = error_rate(spec, &self.link, u)?;
        let k = self.link.k;

        let payload = match u {
            Decision::Tx => {
                let data = new_payload
                    .ok_or_else(|| Error::Protocol(format!("TX at k={k} without a payload")))?;
                Payload { data, origin: k }
            }
            Decision::Rtx => {
                if new_payload.is_some() {
                    return Err(Error::Protocol(format!(
                        "RTX at k={k} must reuse the channel-held payload"
                    )));
                }
                let held = self.pending.take().ok_or_else(|| {
                    Error::Protocol(format!("RTX at k={k} with no pending payload"))
                })?;
                if held.origin + self.link.tau != k {
                    return Err(Error::Protocol(format!(
                        "pending payload origin {} inconsistent with tau {} at k={k}",
                        held.origin, self.link.tau
                    )));
                }
                held
            }
        };

        let draw: f64 = erasure_rng.random();
        let gamma = draw >= lambda_used;

        let output = if gamma {
            self.pending = None;
            ChannelOutput::Delivered(payload)
        } else {
            self.pending = Some(payload);
            ChannelOutput::Erased
        };

        let next_fading = step_fading(spec, self.link.fading_state, fading_rng);
        self.link = self.link.advance(u, gamma, next_fading);

        Ok(Transmission {
            output,
            gamma,
            lambda_used,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Substream};
    use nalgebra::DMatrix;

    fn constant_spec(lams: Vec<f64>, omega_max: usize) -> ChannelSpec {
        ChannelSpec::constant_rates(lams, omega_max)
    }

    fn rngs() -> (ChaCha8Rng, ChaCha8Rng) {
        (
            substream(42, 0, Substream::Erasure),
            substream(42, 0, Substream::Fading),
        )
    }

    #[test]
    fn error_rates_follow_the_table() {
        let spec = constant_spec(vec![0.5, 0.05], 1);
        let link = LinkState::new(&spec);
        assert_eq!(error_rate(&spec, &link, Decision::Tx).unwrap(), 0.5);
        let failed = link.advance(Decision::Tx, false, 0);
        assert_eq!(error_rate(&spec, &failed, Decision::Rtx).unwrap(), 0.05);
        assert!(error_rate(&spec, &link, Decision::Rtx).is_err());
    }

    #[test]
    fn tau_recursion_branches() {
        // Forced failure (λ=1): TX -> τ=1, then RTX -> τ=2.
        let spec = constant_spec(vec![1.0, 1.0, 1.0], 2);
        let (mut erng, mut frng) = rngs();
        let mut ch = Channel::new(&spec);
        let tx = ch
            .transmit(
                &spec,
                Decision::Tx,
                Some(DVector::from_element(1, 7.0)),
                &mut erng,
                &mut frng,
            )
            .unwrap();
        assert!(!tx.gamma);
        assert_eq!(tx.output, ChannelOutput::Erased);
        assert_eq!(ch.link().tau, 1);
        let rtx = ch
            .transmit(&spec, Decision::Rtx, None, &mut erng, &mut frng)
            .unwrap();
        assert!(!rtx.gamma);
        assert_eq!(ch.link().tau, 2);
        assert_eq!(ch.link().omega, ch.link().tau);
    }

    #[test]
    fn delivery_resets_tau_and_carries_payload() {
        // Forced success (λ=0) delivers the held payload with its origin.
        let fail = constant_spec(vec![1.0, 1.0], 1);
        let (mut erng, mut frng) = rngs();
        let mut ch = Channel::new(&fail);
        ch.transmit(
            &fail,
            Decision::Tx,
            Some(DVector::from_element(1, 3.5)),
            &mut erng,
            &mut frng,
        )
        .unwrap();
        assert_eq!(ch.link().tau, 1);

        let ok = constant_spec(vec![0.0, 0.0], 1);
        let rtx = ch
            .transmit(&ok, Decision::Rtx, None, &mut erng, &mut frng)
            .unwrap();
        assert!(rtx.gamma);
        match rtx.output {
            ChannelOutput::Delivered(p) => {
                assert_eq!(p.origin, 0);
                assert_eq!(p.data[0], 3.5);
            }
            ChannelOutput::Erased => panic!("expected delivery"),
        }
        assert_eq!(ch.link().tau, 0);
    }

    #[test]
    fn single_state_fading_never_moves() {
        let spec = constant_spec(vec![0.3], 0);
        let mut rng = substream(5, 0, Substream::Fading);
        for _ in 0..100 {
            assert_eq!(step_fading(&spec, 0, &mut rng), 0);
        }
    }

    #[test]
    fn identity_transition_never_moves() {
        let spec = ChannelSpec {
            omega_max: 0,
            fading: vec![
                crate::model::FadingState { lambda: vec![0.2] },
                crate::model::FadingState { lambda: vec![0.8] },
            ],
            transition: DMatrix::identity(2, 2),
            initial_state: 1,
        };
        let mut rng = substream(5, 0, Substream::Fading);
        for _ in 0..100 {
            assert_eq!(step_fading(&spec, 1, &mut rng), 1);
        }
    }

    #[test]
    fn symmetric_chain_occupancy_is_half() {
        // Stationary distribution of [[0.5, 0.5], [0.5, 0.5]] is (0.5, 0.5).
        let spec = ChannelSpec {
            omega_max: 0,
            fading: vec![
                crate::model::FadingState { lambda: vec![0.2] },
                crate::model::FadingState { lambda: vec![0.8] },
            ],
            transition: DMatrix::from_element(2, 2, 0.5),
            initial_state: 0,
        };
        let mut rng = substream(11, 0, Substream::Fading);
        let mut state = 0;
        let mut hits = 0usize;
        let trials = 100_000;
        for _ in 0..trials {
            state = step_fading(&spec, state, &mut rng);
            hits += (state == 0) as usize;
        }
        let freq = hits as f64 / trials as f64;
        assert!((freq - 0.5).abs() < 0.01, "occupancy {freq}");
    }

    #[test]
    fn empirical_erasure_rate_matches_lambda() {
        // Conditional on (state, s=0), erasures happen at rate λ(0) within
        // three standard errors.
        let lam = 0.37;
        let spec = constant_spec(vec![lam], 0);
        let (mut erng, mut frng) = rngs();
        let mut ch = Channel::new(&spec);
        let trials = 100_000;
        let mut erased = 0usize;
        for _ in 0..trials {
            let t = ch
                .transmit(
                    &spec,
                    Decision::Tx,
                    Some(DVector::from_element(1, 0.0)),
                    &mut erng,
                    &mut frng,
                )
                .unwrap();
            erased += (!t.gamma) as usize;
        }
        let freq = erased as f64 / trials as f64;
        let se = (lam * (1.0 - lam) / trials as f64).sqrt();
        assert!(
            (freq - lam).abs() < 3.0 * se,
            "erasure frequency {freq} vs λ {lam} (3se = {:.5})",
            3.0 * se
        );
    }
}
