//! Shared fixtures and independent oracles for the integration suites.
//!
//! Everything here re-derives expected values from first principles
//! (joint-Gaussian conditioning, explicit-inverse Riccati iteration,
//! sample statistics) so the tests stay independent of the library's own
//! computation paths.

#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use harq_nc::model::{load_scenario, Policy, ScenarioConfig};

pub fn pendulum_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/pendulum.json")
}

pub fn scalar_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/scalar_harq.json")
}

pub fn pendulum_config(seed: u64, runs: usize, policy: Policy) -> ScenarioConfig {
    let mut cfg = load_scenario(pendulum_path()).expect("pendulum scenario");
    cfg.seed = seed;
    cfg.runs = runs;
    cfg.policy = policy;
    cfg
}

pub fn scalar_config(seed: u64, runs: usize, policy: Policy) -> ScenarioConfig {
    let mut cfg = load_scenario(scalar_path()).expect("scalar scenario");
    cfg.seed = seed;
    cfg.runs = runs;
    cfg.policy = policy;
    cfg
}

/// E[x_t | y_0..y_t] and its covariance by conditioning the joint Gaussian
/// of (x_t, y_0..y_t) directly: propagate means and cross-covariances of
/// the stacked trajectory, then apply the Schur-complement formula once.
/// Controls are known constants here.
pub struct BatchConditioner {
    /// mean of x_t for t = 0..horizon
    pub state_means: Vec<DVector<f64>>,
    /// cov(x_t, x_s) for t, s = 0..horizon
    pub state_covs: Vec<Vec<DMatrix<f64>>>,
}

impl BatchConditioner {
    pub fn new(cfg: &ScenarioConfig, controls: &[DVector<f64>], horizon: usize) -> Self {
        let sys = &cfg.system;
        let n = sys.state_dim();
        let mut state_means = vec![sys.m0.clone()];
        for t in 0..horizon {
            let next = sys.a_at(t) * &state_means[t] + sys.b_at(t) * &controls[t];
            state_means.push(next);
        }
        let mut state_covs = vec![vec![DMatrix::<f64>::zeros(n, n); horizon + 1]; horizon + 1];
        state_covs[0][0] = sys.m0_cov.clone();
        for t in 0..horizon {
            // Cov(x_{t+1}, x_{t+1}) = A Σ_tt Aᵀ + W.
            let a = sys.a_at(t);
            state_covs[t + 1][t + 1] = a * &state_covs[t][t] * a.transpose() + sys.w_at(t);
            // Cov(x_{t+1}, x_s) = A Cov(x_t, x_s) for s <= t.
            for s in 0..=t {
                state_covs[t + 1][s] = a * &state_covs[t][s];
                state_covs[s][t + 1] = state_covs[t + 1][s].transpose();
            }
        }
        BatchConditioner {
            state_means,
            state_covs,
        }
    }

    /// Condition x_target on the stacked measurements y_0..y_upto.
    pub fn condition(
        &self,
        cfg: &ScenarioConfig,
        target: usize,
        upto: usize,
        ys: &[DVector<f64>],
    ) -> (DVector<f64>, DMatrix<f64>) {
        let sys = &cfg.system;
        let n = sys.state_dim();
        let p = sys.output_dim();
        let stacked = p * (upto + 1);

        let mut y_mean = DVector::zeros(stacked);
        let mut yy = DMatrix::zeros(stacked, stacked);
        let mut xy = DMatrix::zeros(n, stacked);
        for t in 0..=upto {
            let ct = sys.c_at(t);
            y_mean
                .rows_mut(t * p, p)
                .copy_from(&(ct * &self.state_means[t]));
            xy.columns_mut(t * p, p)
                .copy_from(&(&self.state_covs[target][t] * ct.transpose()));
            for s in 0..=upto {
                let cs = sys.c_at(s);
                let mut block = ct * &self.state_covs[t][s] * cs.transpose();
                if t == s {
                    block += sys.v_at(t);
                }
                yy.view_mut((t * p, s * p), (p, p)).copy_from(&block);
            }
        }
        let y_stack =
            DVector::from_iterator(stacked, ys[..=upto].iter().flat_map(|y| y.iter().copied()));
        let yy_inv = yy.try_inverse().expect("stacked measurement covariance");
        let mean = &self.state_means[target] + &xy * &yy_inv * (y_stack - y_mean);
        let cov = &self.state_covs[target][target] - &xy * &yy_inv * xy.transpose();
        (mean, cov)
    }
}

/// Independent backward Riccati iteration in a different evaluation order:
/// explicit inverses and separately formed factors rather than Cholesky
/// solves against combined products.
pub fn riccati_reference(cfg: &ScenarioConfig, horizon: usize) -> Vec<DMatrix<f64>> {
    let sys = &cfg.system;
    let cost = &cfg.cost;
    let mut s_list = vec![cost.q_at(horizon + 1).clone()];
    for t in (0..=horizon).rev() {
        let a = sys.a_at(t);
        let b = sys.b_at(t);
        let s_next = &s_list[s_list.len() - 1];
        let bsb = b.transpose() * s_next * b;
        let lam = &bsb + cost.r_at(t);
        let lam_inv = lam.try_inverse().expect("Lambda invertible");
        let asb = a.transpose() * s_next * b;
        let bsa = b.transpose() * s_next * a;
        let s_t = cost.q_at(t) + a.transpose() * s_next * a - &asb * &lam_inv * &bsa;
        s_list.push(s_t);
    }
    s_list.reverse();
    s_list
}

/// Sample mean of a set of vectors.
pub fn mean_vec(samples: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(samples[0].len());
    for s in samples {
        acc += s;
    }
    acc / samples.len() as f64
}

/// Per-component standard error of the mean.
pub fn se_vec(samples: &[DVector<f64>], mean: &DVector<f64>) -> DVector<f64> {
    let n = samples.len();
    let mut var = DVector::zeros(mean.len());
    for s in samples {
        let d = s - mean;
        var += d.component_mul(&d);
    }
    (var / (n - 1) as f64 / n as f64).map(f64::sqrt)
}

/// Standard normal draw helper.
pub fn draw_normal(rng: &mut impl Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}
