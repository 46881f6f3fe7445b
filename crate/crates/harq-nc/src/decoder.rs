//! Decoder-side switching filter and certainty-equivalent control.
//!
//! The decoder never runs a gain-coupled estimator: it propagates whichever
//! estimate last arrived through the known dynamics and applied controls,
//! switching on what the channel did. On a delivery it restarts from the
//! payload; on an erasure it coasts open loop. The control law then simply
//! feeds back the estimate through the Riccati gains: a_k = −L_k x̂_k.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::channel::{ChannelOutput, Decision};
use crate::lqr::GainSchedule;
use crate::model::SystemModel;
use crate::{Error, Result};

/// Receiver state at time k: the estimate x̂_k and the recent controls the
/// retransmission branch needs (a_{k−τ−1}..a_{k−1} with τ ≤ ω_max).
#[derive(Debug, Clone)]
pub struct DecoderState {
    x_hat: DVector<f64>,
    a_history: VecDeque<(usize, DVector<f64>)>,
    k: usize,
    history_cap: usize,
}

impl DecoderState {
    /// Start at k = 0 with the prior mean: x̂_0 = m_0 (nothing has arrived;
    /// the first channel output is the erasure symbol by convention).
    pub fn new(sys: &SystemModel, omega_max: usize) -> Self {
        DecoderState {
            x_hat: sys.m0.clone(),
            a_history: VecDeque::new(),
            k: 0,
            history_cap: omega_max + 2,
        }
    }

    /// Current estimate x̂_k.
    pub fn x_hat(&self) -> &DVector<f64> {
        &self.x_hat
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn a_at(&self, t: usize) -> Result<&DVector<f64>> {
        self.a_history
            .iter()
            .rev()
            .find(|(time, _)| *time == t)
            .map(|(_, a)| a)
            .ok_or_else(|| {
                Error::Protocol(format!(
                    "control history underflow: a_{t} not retained at k={}",
                    self.k
                ))
            })
    }

    /// Switching estimate update on the channel output z_k, given the
    /// acknowledged decision/outcome of step k−1 and the pre-update τ_{k−1}:
    ///
    /// - TX success:  x̂_k = A_{k−1} x̌_{k−1} + B_{k−1} a_{k−1}
    /// - RTX success: x̂_k = (Π_{t=1}^{τ+1} A_{k−t}) x̌_{k−τ−1}
    ///   + Σ_{t=0}^{τ} (Π_{t'=1}^{t} A_{k−t'}) B_{k−t−1} a_{k−t−1}
    /// - erasure:     x̂_k = A_{k−1} x̂_{k−1} + B_{k−1} a_{k−1}
    pub fn update_estimate(
        &mut self,
        z: &ChannelOutput,
        u_prev: Decision,
        gamma_prev: bool,
        tau_prev: usize,
        sys: &SystemModel,
    ) -> Result<&DVector<f64>> {
        let k = self.k + 1;
        self.x_hat = match (z, u_prev, gamma_prev) {
            (ChannelOutput::Delivered(payload), Decision::Tx, true) => {
                if payload.origin != k - 1 {
                    return Err(Error::Protocol(format!(
                        "TX delivery at k={k} carries origin {}, expected {}",
                        payload.origin,
                        k - 1
                    )));
                }
                sys.a_at(k - 1) * &payload.data + sys.b_at(k - 1) * self.a_at(k - 1)?
            }
            (ChannelOutput::Delivered(payload), Decision::Rtx, true) => {
                let origin = k - 1 - tau_prev;
                if payload.origin != origin {
                    return Err(Error::Protocol(format!(
                        "RTX delivery at k={k} carries origin {}, expected {origin}",
                        payload.origin
                    )));
                }
                let n = sys.state_dim();
                // Σ_t (Π_{t'=1}^{t} A_{k−t'}) B_{k−t−1} a_{k−t−1}, products
                // extended one factor per term.
                let mut prod = DMatrix::identity(n, n);
                let mut acc = DVector::zeros(n);
                for t in 0..=tau_prev {
                    if t > 0 {
                        prod = &prod * sys.a_at(k - t);
                    }
                    acc += &prod * (sys.b_at(k - t - 1) * self.a_at(k - t - 1)?);
                }
                let full = &prod * sys.a_at(origin);
                acc + full * &payload.data
            }
            (ChannelOutput::Erased, _, false) => {
                sys.a_at(k - 1) * &self.x_hat + sys.b_at(k - 1) * self.a_at(k - 1)?
            }
            (out, u, g) => {
                return Err(Error::Protocol(format!(
                    "inconsistent channel outcome at k={k}: z delivered={}, u={u}, gamma={g}",
                    out.is_delivered()
                )));
            }
        };
        self.k = k;
        Ok(&self.x_hat)
    }

    /// Certainty-equivalent control a_k = −L_k x̂_k, appended to the
    /// control history for later retransmission corrections.
    pub fn control_input(&mut self, sched: &GainSchedule) -> Result<DVector<f64>> {
        let a = -(sched.control_gain(self.k)? * &self.x_hat);
        self.record_control(a.clone());
        Ok(a)
    }

    /// Retain an externally chosen control (baselines and tests).
    pub fn record_control(&mut self, a: DVector<f64>) {
        self.a_history.push_back((self.k, a));
        while self.a_history.len() > self.history_cap {
            self.a_history.pop_front();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Payload;
    use crate::model::{CostSpec, Schedule};
    use approx::assert_relative_eq;

    fn scalar_sys(a: f64, b: f64, m0: f64) -> SystemModel {
        SystemModel {
            a: Schedule::Constant(DMatrix::from_element(1, 1, a)),
            b: Schedule::Constant(DMatrix::from_element(1, 1, b)),
            c: Schedule::Constant(DMatrix::from_element(1, 1, 1.0)),
            w: Schedule::Constant(DMatrix::from_element(1, 1, 1.0)),
            v: Schedule::Constant(DMatrix::from_element(1, 1, 1.0)),
            m0: DVector::from_element(1, m0),
            m0_cov: DMatrix::from_element(1, 1, 1.0),
        }
    }

    #[test]
    fn erasure_branch_coasts_open_loop() {
        // A=2, B=1, x̂=1, a=0.5 → x̂' = 2.5.
        let sys = scalar_sys(2.0, 1.0, 1.0);
        let mut dec = DecoderState::new(&sys, 1);
        dec.record_control(DVector::from_element(1, 0.5));
        let x = dec
            .update_estimate(&ChannelOutput::Erased, Decision::Tx, false, 0, &sys)
            .unwrap();
        assert_relative_eq!(x[0], 2.5);
    }

    #[test]
    fn rtx_success_branch_hand_arithmetic() {
        // τ_{k−1}=1, A=2, B=1, delivered x̌_{k−2}=1, a_{k−2}=0.5, a_{k−1}=−1:
        // x̂_k = A²·1 + (a_{k−1} + A·B·a_{k−2}) = 4 − 1 + 1 = 4.
        let sys = scalar_sys(2.0, 1.0, 0.0);
        let mut dec = DecoderState::new(&sys, 1);
        dec.record_control(DVector::from_element(1, 0.5)); // a_0
        dec.update_estimate(&ChannelOutput::Erased, Decision::Tx, false, 0, &sys)
            .unwrap();
        dec.record_control(DVector::from_element(1, -1.0)); // a_1
        let z = ChannelOutput::Delivered(Payload {
            data: DVector::from_element(1, 1.0),
            origin: 0,
        });
        let x = dec
            .update_estimate(&z, Decision::Rtx, true, 1, &sys)
            .unwrap();
        assert_relative_eq!(x[0], 4.0);
    }

    #[test]
    fn tx_success_branch_restarts_from_payload() {
        let sys = scalar_sys(2.0, 1.0, 0.0);
        let mut dec = DecoderState::new(&sys, 1);
        dec.record_control(DVector::from_element(1, 0.25));
        let z = ChannelOutput::Delivered(Payload {
            data: DVector::from_element(1, 3.0),
            origin: 0,
        });
        let x = dec
            .update_estimate(&z, Decision::Tx, true, 0, &sys)
            .unwrap();
        assert_relative_eq!(x[0], 2.0 * 3.0 + 0.25);
    }

    #[test]
    fn wrong_origin_is_a_protocol_violation() {
        let sys = scalar_sys(2.0, 1.0, 0.0);
        let mut dec = DecoderState::new(&sys, 1);
        dec.record_control(DVector::from_element(1, 0.0));
        let z = ChannelOutput::Delivered(Payload {
            data: DVector::from_element(1, 3.0),
            origin: 7,
        });
        assert!(dec
            .update_estimate(&z, Decision::Tx, true, 0, &sys)
            .is_err());
    }

    #[test]
    fn control_is_negative_gain_times_estimate() {
        let sys = scalar_sys(1.0, 1.0, 2.0);
        let cost = CostSpec {
            q: Schedule::Constant(DMatrix::from_element(1, 1, 1.0)),
            r: Schedule::Constant(DMatrix::from_element(1, 1, 1.0)),
        };
        let sched = crate::lqr::riccati_backward(&sys, &cost, 0).unwrap();
        // L_0 = 0.5, x̂_0 = m_0 = 2 → a_0 = −1.
        let mut dec = DecoderState::new(&sys, 1);
        let a = dec.control_input(&sched).unwrap();
        assert_relative_eq!(a[0], -1.0);

        // Zero estimate → zero control.
        let sys0 = scalar_sys(1.0, 1.0, 0.0);
        let mut dec0 = DecoderState::new(&sys0, 1);
        let a0 = dec0.control_input(&sched).unwrap();
        assert_eq!(a0[0], 0.0);
    }
}
