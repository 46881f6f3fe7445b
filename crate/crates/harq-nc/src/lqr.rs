//! Backward Riccati recursion and the derived gain/weight schedules.
//!
//! Both sides of the loop consume this: the decoder applies the feedback
//! gains L_k, the encoder weighs its switching decision with the mismatch
//! weights Γ_k. Everything is computed once per scenario and then shared
//! immutably.

use nalgebra::DMatrix;

use crate::model::{CostSpec, SystemModel};
use crate::{Error, Result};

/// Condition-number ceiling for the control-weight factorization.
const LAMBDA_COND_LIMIT: f64 = 1e12;

/// Output of the backward pass over t = 0..N:
///
/// - `S_t` — cost-to-go weights, t = 0..N+1, with S_{N+1} equal to the
///   terminal state weight;
/// - `L_t = Λ_t⁻¹ Bᵀ S_{t+1} A` — feedback gains, t = 0..N;
/// - `Λ_t = Bᵀ S_{t+1} B + R` — control weights, t = 0..N;
/// - `Γ_t = Lᵀ Λ L` — mismatch weights, t = 0..N, plus the boundary
///   convention Γ_{N+1} = 0 so decision statistics at t = N are defined
///   (a decision at the last step can no longer affect the objective).
#[derive(Debug, Clone)]
pub struct GainSchedule {
    s: Vec<DMatrix<f64>>,
    l: Vec<DMatrix<f64>>,
    gamma: Vec<DMatrix<f64>>,
    lambda: Vec<DMatrix<f64>>,
    horizon: usize,
}

impl GainSchedule {
    /// Horizon N this schedule was computed for.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// S_t for t = 0..N+1.
    pub fn s(&self, t: usize) -> &DMatrix<f64> {
        &self.s[t]
    }

    /// Γ_t for t = 0..N+1 (Γ_{N+1} = 0).
    pub fn gamma(&self, t: usize) -> &DMatrix<f64> {
        &self.gamma[t]
    }

    /// Λ_t for t = 0..N.
    pub fn lambda(&self, t: usize) -> &DMatrix<f64> {
        &self.lambda[t]
    }

    /// L_t for t = 0..N, bounds-checked.
    pub fn control_gain(&self, t: usize) -> Result<&DMatrix<f64>> {
        self.l.get(t).ok_or_else(|| {
            Error::IndexOutOfRange(format!(
                "control gain index {t} outside 0..={}",
                self.horizon
            ))
        })
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Backward Riccati pass from S_{N+1} = Q_{N+1} down to S_0.
///
/// S is symmetrized after every step to suppress asymmetry drift over long
/// horizons, and Λ is inverted through its Cholesky factor rather than an
/// explicit inverse. Fails if Λ_t is numerically singular (condition number
/// above 1e12), which signals an invalid R or an overflowing recursion.
pub fn riccati_backward(
    sys: &SystemModel,
    cost: &CostSpec,
    horizon: usize,
) -> Result<GainSchedule> {
    let n = sys.state_dim();
    let m = sys.input_dim();

    let mut s = vec![DMatrix::zeros(n, n); horizon + 2];
    let mut l = vec![DMatrix::zeros(m, n); horizon + 1];
    let mut gamma = vec![DMatrix::zeros(n, n); horizon + 2];
    let mut lambda = vec![DMatrix::zeros(m, m); horizon + 1];

    s[horizon + 1] = cost.q_at(horizon + 1).clone();
    symmetrize(&mut s[horizon + 1]);
    // gamma[horizon + 1] stays zero by convention.

    for t in (0..=horizon).rev() {
        let a = sys.a_at(t);
        let b = sys.b_at(t);
        let s_next = &s[t + 1];

        let mut lam = b.transpose() * s_next * b + cost.r_at(t);
        symmetrize(&mut lam);

        let eigs = lam.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = eigs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            });
        if lo <= 0.0 || hi / lo > LAMBDA_COND_LIMIT {
            return Err(Error::Numerical(format!(
                "control weight Lambda at t={t} is singular or ill-conditioned \
                 (eigenvalues in [{lo:.3e}, {hi:.3e}])"
            )));
        }
        let chol = lam
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("Cholesky of Lambda failed at t={t}")))?;

        // L = Λ⁻¹ Bᵀ S_{t+1} A, Γ = (Bᵀ S_{t+1} A)ᵀ L, S = Q + Aᵀ S_{t+1} A − Γ.
        let bsa = b.transpose() * s_next * a;
        let gain = chol.solve(&bsa);
        let mut gam = bsa.transpose() * &gain;
        symmetrize(&mut gam);
        let mut s_t = cost.q_at(t) + a.transpose() * s_next * a - &gam;
        symmetrize(&mut s_t);

        s[t] = s_t;
        l[t] = gain;
        gamma[t] = gam;
        lambda[t] = lam;
    }

    Ok(GainSchedule {
        s,
        l,
        gamma,
        lambda,
        horizon,
    })
}
