//! Encoder-side MMSE state estimation.
//!
//! The filter runs in two pieces. The covariance side (P, M, K, N) never
//! depends on data — controls, measurements, or channel luck — so it is
//! computed once per scenario as a [`CovarianceSchedule`] and shared across
//! every Monte Carlo run. The mean side ([`FilterState`]) is the per-run
//! recursion over measurements and applied controls.
//!
//! The information-form update
//! `P = (M⁻¹ + Cᵀ V⁻¹ C)⁻¹` is the reference path; a Joseph-stabilized
//! covariance form is the fallback whenever M or V is singular or badly
//! conditioned (degenerate test fixtures with zero noise take this path,
//! with pseudo-inverses standing in for inverses).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::model::SystemModel;
use crate::{Error, Result};

/// Conditioning ceiling beyond which the information form is abandoned.
const FORM_COND_LIMIT: f64 = 1e12;

/// Which covariance update to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterForm {
    /// Pick per step: information form when well conditioned, else Joseph.
    Auto,
    /// Force the information form (errors out on singular M or V).
    Information,
    /// Force the Joseph-stabilized covariance form.
    Joseph,
}

/// Data-independent filter quantities for k = 0..N:
/// predicted covariance M_k, filtered covariance P_k, gain K_k, and
/// innovation covariance N_k = C M Cᵀ + V.
#[derive(Debug, Clone)]
pub struct CovarianceSchedule {
    p: Vec<DMatrix<f64>>,
    m: Vec<DMatrix<f64>>,
    k_gain: Vec<DMatrix<f64>>,
    n_inno: Vec<DMatrix<f64>>,
    horizon: usize,
}

impl CovarianceSchedule {
    pub fn compute(sys: &SystemModel, horizon: usize) -> Result<Self> {
        Self::compute_with_form(sys, horizon, FilterForm::Auto)
    }

    pub fn compute_with_form(sys: &SystemModel, horizon: usize, form: FilterForm) -> Result<Self> {
        let n = sys.state_dim();
        let p_dim = sys.output_dim();
        let mut p = Vec::with_capacity(horizon + 1);
        let mut m = Vec::with_capacity(horizon + 1);
        let mut k_gain = Vec::with_capacity(horizon + 1);
        let mut n_inno = Vec::with_capacity(horizon + 1);

        for k in 0..=horizon {
            let m_k = if k == 0 {
                symmetrized(&sys.m0_cov)
            } else {
                let a = sys.a_at(k - 1);
                symmetrized(&(a * &p[k - 1] * a.transpose() + sys.w_at(k - 1)))
            };
            let c = sys.c_at(k);
            let v = sys.v_at(k);
            let n_k = symmetrized(&(c * &m_k * c.transpose() + v));

            let use_information = match form {
                FilterForm::Information => true,
                FilterForm::Joseph => false,
                FilterForm::Auto => well_conditioned(&m_k) && well_conditioned(v),
            };

            let (p_k, gain) = if use_information {
                let m_inv = invert_spd(&m_k).ok_or_else(|| {
                    Error::Numerical(format!("predicted covariance M at k={k} is singular"))
                })?;
                let v_inv = invert_spd(v).ok_or_else(|| {
                    Error::Numerical(format!("measurement covariance V at k={k} is singular"))
                })?;
                let info = symmetrized(&(m_inv + c.transpose() * &v_inv * c));
                let p_k = invert_spd(&info).ok_or_else(|| {
                    Error::Numerical(format!("information matrix at k={k} is singular"))
                })?;
                let gain = &p_k * c.transpose() * v_inv;
                (symmetrized(&p_k), gain)
            } else {
                // Joseph form; pseudo-inverse covers singular innovation
                // covariance from zero-noise fixtures.
                let gain = &m_k * c.transpose() * pseudo_inverse(&n_k);
                let i_kc = DMatrix::identity(n, n) - &gain * c;
                let p_k = &i_kc * &m_k * i_kc.transpose() + &gain * v * gain.transpose();
                (symmetrized(&p_k), gain)
            };

            p.push(p_k);
            m.push(m_k);
            k_gain.push(gain);
            n_inno.push(n_k);
        }

        let _ = p_dim;
        Ok(CovarianceSchedule {
            p,
            m,
            k_gain,
            n_inno,
            horizon,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
    /// Filtered covariance P_k.
    pub fn p(&self, k: usize) -> &DMatrix<f64> {
        &self.p[k]
    }
    /// Predicted covariance M_k.
    pub fn m(&self, k: usize) -> &DMatrix<f64> {
        &self.m[k]
    }
    /// Kalman gain K_k.
    pub fn k_gain(&self, k: usize) -> &DMatrix<f64> {
        &self.k_gain[k]
    }
    /// Innovation covariance N_k.
    pub fn n_inno(&self, k: usize) -> &DMatrix<f64> {
        &self.n_inno[k]
    }
}

fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn well_conditioned(m: &DMatrix<f64>) -> bool {
    let eigs = symmetrized(m).symmetric_eigen().eigenvalues;
    let (lo, hi) = eigs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    lo > 0.0 && hi / lo <= FORM_COND_LIMIT
}

fn invert_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    symmetrized(m)
        .cholesky()
        .map(|c| c.solve(&DMatrix::identity(m.nrows(), m.ncols())))
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix via its
/// eigendecomposition; eigenvalues below 1e-12 of the largest are dropped.
fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrized(m).symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-12 * max.max(1e-300);
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let inv = if lam > tol { 1.0 / lam } else { 0.0 };
        scaled.column_mut(j).scale_mut(inv);
    }
    &scaled * eig.eigenvectors.transpose()
}

/// Per-run mean-side filter state at time k: the conditional mean x̌_k, the
/// latest innovation ν_k, and a handle to the shared covariance schedule.
#[derive(Debug, Clone)]
pub struct FilterState {
    x_check: DVector<f64>,
    nu: DVector<f64>,
    k: usize,
    cov: Arc<CovarianceSchedule>,
}

impl FilterState {
    /// Conditional mean x̌_k.
    pub fn x_check(&self) -> &DVector<f64> {
        &self.x_check
    }
    /// Latest innovation ν_k.
    pub fn nu(&self) -> &DVector<f64> {
        &self.nu
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn covariances(&self) -> &Arc<CovarianceSchedule> {
        &self.cov
    }
    /// Filtered covariance P_k at the current step.
    pub fn p(&self) -> &DMatrix<f64> {
        self.cov.p(self.k)
    }
    /// Predicted covariance M_k at the current step.
    pub fn m_pred(&self) -> &DMatrix<f64> {
        self.cov.m(self.k)
    }
    /// Kalman gain K_k at the current step.
    pub fn k_gain(&self) -> &DMatrix<f64> {
        self.cov.k_gain(self.k)
    }
    /// Innovation covariance N_k at the current step.
    pub fn n_inno(&self) -> &DMatrix<f64> {
        self.cov.n_inno(self.k)
    }
}

/// Filter initialization at k = 0:
/// ν_0 = y_0 − C_0 m_0 and x̌_0 = m_0 + K_0 ν_0.
pub fn kf_initialize(
    sys: &SystemModel,
    y0: &DVector<f64>,
    cov: Arc<CovarianceSchedule>,
) -> FilterState {
    let nu = y0 - sys.c_at(0) * &sys.m0;
    let x_check = &sys.m0 + cov.k_gain(0) * &nu;
    FilterState {
        x_check,
        nu,
        k: 0,
        cov,
    }
}

/// One measurement update: predict with the applied control, then correct
/// with the innovation:
/// m_k = A x̌_{k−1} + B a_{k−1}, ν_k = y_k − C m_k, x̌_k = m_k + K_k ν_k.
pub fn kf_step(
    st: &FilterState,
    a_prev: &DVector<f64>,
    y: &DVector<f64>,
    sys: &SystemModel,
) -> FilterState {
    let k = st.k + 1;
    let mean_pred = sys.a_at(k - 1) * &st.x_check + sys.b_at(k - 1) * a_prev;
    let nu = y - sys.c_at(k) * &mean_pred;
    let x_check = &mean_pred + st.cov.k_gain(k) * &nu;
    FilterState {
        x_check,
        nu,
        k,
        cov: Arc::clone(&st.cov),
    }
}
