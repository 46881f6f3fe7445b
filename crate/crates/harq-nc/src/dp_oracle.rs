//! Grid-based finite-horizon value iteration for scalar scenarios.
//!
//! For n = p = 1 the encoder's decision problem collapses to a chain over
//! (ẽ, recent innovations, τ, fading state), small enough to solve exactly
//! on a grid: value tables are built backward from a zero terminal value,
//! mixing over the erasure outcome, integrating the next innovation with
//! Gauss–Hermite quadrature (innovations are exactly Gaussian), and summing
//! the fading transition row exactly.
//!
//! The tables serve three purposes: they define the exact decision residual
//! Δ_k consumed by the encoder's exact mode, they expose per-node decision
//! maps for threshold-structure audits, and they anchor the one-step
//! lookahead approximation against the exact rule.
//!
//! Beyond scalars the state blows up combinatorially (the grid is
//! exponential in the state and innovation dimensions), so higher
//! dimensions are rejected rather than approximated.

use rayon::prelude::*;

use crate::channel::Decision;
use crate::estimator::CovarianceSchedule;
use crate::lqr::{riccati_backward, GainSchedule};
use crate::model::{ChannelSpec, ScenarioConfig};
use crate::{Error, Result};

/// Tie band inside which the two action values count as equal (ties
/// transmit, mirroring the Ω ≥ 0 rule).
pub const TIE_TOL: f64 = 1e-12;

/// Grid resolution and quadrature order.
#[derive(Debug, Clone)]
pub struct DpConfig {
    /// Points on the mismatch axis.
    pub e_points: usize,
    /// Points on each innovation axis.
    pub nu_points: usize,
    /// Gauss–Hermite nodes for the next-innovation expectation.
    pub quad_points: usize,
    /// Half-width of every axis in marginal standard deviations.
    pub span_sigmas: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            e_points: 201,
            nu_points: 201,
            quad_points: 33,
            span_sigmas: 8.0,
        }
    }
}

/// A uniform one-dimensional grid axis.
#[derive(Debug, Clone)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    fn symmetric(half_width: f64, n: usize) -> Axis {
        let w = if half_width > 0.0 { half_width } else { 1.0 };
        Axis { lo: -w, hi: w, n }
    }

    pub fn coord(&self, i: usize) -> f64 {
        if self.n == 1 {
            return 0.5 * (self.lo + self.hi);
        }
        self.lo + (self.hi - self.lo) * i as f64 / (self.n - 1) as f64
    }

    /// Cell index and fractional offset for clamped interpolation.
    fn locate(&self, x: f64) -> (usize, f64) {
        if self.n == 1 {
            return (0, 0.0);
        }
        let step = (self.hi - self.lo) / (self.n - 1) as f64;
        let u = ((x - self.lo) / step).clamp(0.0, (self.n - 1) as f64);
        let i = (u.floor() as usize).min(self.n - 2);
        (i, u - i as f64)
    }
}

/// Values and argmin decisions over one τ layer of the grid. Layout is
/// row-major over (e, ν slots, fading).
#[derive(Debug, Clone)]
struct TauSlice {
    wdim: usize,
    values: Vec<f64>,
    decisions: Vec<Decision>,
}

/// The value function at one time index, tabulated per τ layer.
#[derive(Debug, Clone)]
pub struct ValueGrid {
    pub k: usize,
    e_axis: Axis,
    /// Axis for window slot j (the innovation from j steps ago), j < ω_max.
    nu_axes: Vec<Axis>,
    slices: Vec<TauSlice>,
    n_fading: usize,
}

/// One exported grid node, for CSV dumps and audits.
#[derive(Debug, Clone)]
pub struct NodeRecord {
    pub k: usize,
    pub tau: usize,
    pub fading: usize,
    pub e_tilde: f64,
    pub window: Vec<f64>,
    pub value: f64,
    pub decision: Decision,
}

impl ValueGrid {
    /// Window dimension carried at each τ: nothing pending and the
    /// over-budget layer hold no innovations; in between the window holds
    /// exactly τ of them.
    fn wdim(tau: usize, omega_max: usize) -> usize {
        if tau == 0 || tau > omega_max {
            0
        } else {
            tau
        }
    }

    fn node_count(&self, wdim: usize) -> usize {
        let mut count = self.e_axis.n;
        for ax in &self.nu_axes[..wdim] {
            count *= ax.n;
        }
        count * self.n_fading
    }

    /// Multilinear interpolation of V at (τ, fading, ẽ, window), with
    /// coordinates clamped into the grid span.
    pub fn value_at(&self, tau: usize, fading: usize, e: f64, window: &[f64]) -> f64 {
        let slice = &self.slices[tau];
        let wdim = slice.wdim;
        debug_assert!(window.len() >= wdim, "window too short for tau={tau}");

        // Locate along each axis: (cell, fraction) per dimension.
        let mut cells = [0usize; 16];
        let mut fracs = [0f64; 16];
        let (c0, f0) = self.e_axis.locate(e);
        cells[0] = c0;
        fracs[0] = f0;
        for j in 0..wdim {
            let (c, f) = self.nu_axes[j].locate(window[j]);
            cells[1 + j] = c;
            fracs[1 + j] = f;
        }
        let dims = 1 + wdim;

        // Accumulate over the 2^dims cell corners.
        let mut total = 0.0;
        for corner in 0..(1usize << dims) {
            let mut weight = 1.0;
            let mut idx = 0usize;
            for d in 0..dims {
                let hi = (corner >> d) & 1 == 1;
                let coord = cells[d] + hi as usize;
                weight *= if hi { fracs[d] } else { 1.0 - fracs[d] };
                let axis_n = if d == 0 {
                    self.e_axis.n
                } else {
                    self.nu_axes[d - 1].n
                };
                idx = idx * axis_n + coord.min(axis_n - 1);
            }
            total += weight * slice.values[idx * self.n_fading + fading];
        }
        total
    }

    /// Enumerate every node of the grid with its value and decision.
    pub fn nodes(&self) -> Vec<NodeRecord> {
        let mut out = Vec::new();
        for (tau, slice) in self.slices.iter().enumerate() {
            let wdim = slice.wdim;
            let total = self.node_count(wdim);
            for flat in 0..total {
                let fading = flat % self.n_fading;
                let mut rest = flat / self.n_fading;
                let mut window = vec![0.0; wdim];
                for j in (0..wdim).rev() {
                    window[j] = self.nu_axes[j].coord(rest % self.nu_axes[j].n);
                    rest /= self.nu_axes[j].n;
                }
                let e_tilde = self.e_axis.coord(rest);
                out.push(NodeRecord {
                    k: self.k,
                    tau,
                    fading,
                    e_tilde,
                    window,
                    value: slice.values[flat],
                    decision: slice.decisions[flat],
                });
            }
        }
        out
    }
}

/// Scalar scenario data plus the horizon-indexed value grids.
#[derive(Debug, Clone)]
pub struct ValueTables {
    /// grids[k] tabulates V_k, k = 0..N+1 (the terminal grid is zero).
    grids: Vec<ValueGrid>,
    /// Gauss–Hermite (node, weight) pairs for ∫ e^{-x²} f(x) dx.
    quad: Vec<(f64, f64)>,
    pub cfg: DpConfig,
    horizon: usize,
    omega_max: usize,
    n_fading: usize,
    // Scalar schedules.
    a: Vec<f64>,           // A_k, k = 0..N
    k_gain: Vec<f64>,      // K_k, k = 0..N
    n_inno: Vec<f64>,      // N_k, k = 0..N
    p_cov: Vec<f64>,       // P_k, k = 0..N
    gamma: Vec<f64>,       // Γ_t, t = 0..N+1
    lambda: Vec<Vec<f64>>, // per fading state
    transition: Vec<Vec<f64>>,
    // Axis spans shared by every grid.
    e_half: f64,
    nu_sigma_max: f64,
}

impl ValueTables {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn grid(&self, k: usize) -> &ValueGrid {
        &self.grids[k]
    }

    fn lambda_at(&self, state: usize, s: usize) -> f64 {
        let t = &self.lambda[state];
        t[s.min(t.len() - 1)]
    }

    /// Clamp a time index into the scalar schedules (queries at k−j for
    /// small k fall back to the first entry; such nodes are off-path).
    fn a_at(&self, k: usize) -> f64 {
        self.a[k.min(self.a.len() - 1)]
    }

    fn k_at(&self, k: usize) -> f64 {
        self.k_gain[k.min(self.k_gain.len() - 1)]
    }

    /// ε at a node: Σ_{t=0}^{τ−1} (Π_{t'=0}^{t} A_{k−t'}) K_{k−t} ν_{k−t},
    /// with window[t] holding ν_{k−t}.
    fn epsilon(&self, k: usize, tau: usize, window: &[f64]) -> f64 {
        let mut acc = 0.0;
        let mut prod = self.a_at(k);
        for (t, &nu) in window.iter().enumerate().take(tau) {
            if t > 0 {
                prod *= self.a_at(k.saturating_sub(t));
            }
            acc += prod * self.k_at(k.saturating_sub(t)) * nu;
        }
        acc
    }

    /// Expected continuation value over (ν_{k+1}, fading transition) for a
    /// fixed next-τ and a window builder. `zero_continuation` replaces V
    /// with 0 (the one-step lookahead comparison).
    #[allow(clippy::too_many_arguments)]
    fn branch_expectation(
        &self,
        grid_next: &ValueGrid,
        k: usize,
        fading: usize,
        base: f64,
        tau_next: usize,
        window: &[f64],
        include_quadratic: bool,
        zero_continuation: bool,
    ) -> f64 {
        let sigma = self.n_inno[(k + 1).min(self.n_inno.len() - 1)]
            .max(0.0)
            .sqrt();
        let kg = self.k_at(k + 1);
        let gamma_next = self.gamma[k + 1];
        let wdim = ValueGrid::wdim(tau_next, self.omega_max);
        let row = &self.transition[fading];

        let mut acc = 0.0;
        let mut next_window = [0.0f64; 16];
        for &(node, weight) in &self.quad {
            let nu_next = std::f64::consts::SQRT_2 * sigma * node;
            let e_next = base + kg * nu_next;
            let mut term = 0.0;
            if include_quadratic {
                term += gamma_next * e_next * e_next;
            }
            if !zero_continuation {
                next_window[0] = nu_next;
                next_window[1..=window.len()].copy_from_slice(window);
                let mut cont = 0.0;
                for (s_next, &prob) in row.iter().enumerate() {
                    if prob > 0.0 {
                        cont += prob
                            * grid_next.value_at(tau_next, s_next, e_next, &next_window[..wdim]);
                    }
                }
                term += cont;
            }
            acc += weight * term;
        }
        acc / std::f64::consts::PI.sqrt()
    }

    /// Action value Q(u) at a node of the time-k grid: the γ-mixture of the
    /// next-step mismatch quadratic plus continuation, plus tr(Γ P)_{k+1}.
    #[allow(clippy::too_many_arguments)]
    fn q_value(
        &self,
        grid_next: &ValueGrid,
        k: usize,
        u: Decision,
        e: f64,
        window: &[f64],
        tau: usize,
        fading: usize,
        zero_continuation: bool,
    ) -> f64 {
        let lam = match u {
            Decision::Tx => self.lambda_at(fading, 0),
            Decision::Rtx => self.lambda_at(fading, tau),
        };
        let drift = self.a_at(k) * e;
        // Failure keeps the pending measurement: a fresh failure restarts
        // the clock, a retransmission failure extends it.
        let (tau_fail, success_base) = match u {
            Decision::Tx => (1, 0.0),
            Decision::Rtx => (tau + 1, self.epsilon(k, tau, window)),
        };
        let fail = self.branch_expectation(
            grid_next,
            k,
            fading,
            drift,
            tau_fail,
            window,
            true,
            zero_continuation,
        );
        let succ = self.branch_expectation(
            grid_next,
            k,
            fading,
            success_base,
            0,
            &[],
            true,
            zero_continuation,
        );
        let trace_term = self.gamma[k + 1] * self.p_cov[(k + 1).min(self.p_cov.len() - 1)];
        lam * fail + (1.0 - lam) * succ + trace_term
    }
}

/// Build the value tables for a scalar scenario with the given grid
/// configuration. Rejects non-scalar systems.
pub fn build_tables(cfg: &ScenarioConfig, dp_cfg: DpConfig) -> Result<ValueTables> {
    if !cfg.is_scalar() {
        return Err(Error::Unsupported(format!(
            "DP oracle supports scalar systems only (n = p = 1); got n={}, p={}",
            cfg.state_dim(),
            cfg.output_dim()
        )));
    }
    let horizon = cfg.horizon;
    let cov = CovarianceSchedule::compute(&cfg.system, horizon)?;
    let gains = riccati_backward(&cfg.system, &cfg.cost, horizon)?;
    build_tables_from_schedules(cfg, &cov, &gains, dp_cfg)
}

/// Same as [`build_tables`] but reusing already computed schedules.
pub fn build_tables_from_schedules(
    cfg: &ScenarioConfig,
    cov: &CovarianceSchedule,
    gains: &GainSchedule,
    dp_cfg: DpConfig,
) -> Result<ValueTables> {
    if !cfg.is_scalar() {
        return Err(Error::Unsupported(
            "DP oracle supports scalar systems only (n = p = 1)".into(),
        ));
    }
    if cfg.channel.omega_max > 15 {
        return Err(Error::Unsupported(
            "DP oracle grid limited to omega_max <= 15".into(),
        ));
    }
    let horizon = cfg.horizon;
    let omega_max = cfg.channel.omega_max;
    let n_fading = cfg.channel.num_states();

    let quad = gauss_quad::GaussHermite::new(dp_cfg.quad_points)
        .map_err(|e| Error::Numerical(format!("Gauss-Hermite init failed: {e}")))?
        .into_node_weight_pairs();

    let a: Vec<f64> = (0..=horizon).map(|k| cfg.system.a_at(k)[(0, 0)]).collect();
    let k_gain: Vec<f64> = (0..=horizon).map(|k| cov.k_gain(k)[(0, 0)]).collect();
    let n_inno: Vec<f64> = (0..=horizon).map(|k| cov.n_inno(k)[(0, 0)]).collect();
    let p_cov: Vec<f64> = (0..=horizon).map(|k| cov.p(k)[(0, 0)]).collect();
    let gamma: Vec<f64> = (0..=horizon + 1).map(|t| gains.gamma(t)[(0, 0)]).collect();
    let lambda: Vec<Vec<f64>> = cfg
        .channel
        .fading
        .iter()
        .map(|f| f.lambda.clone())
        .collect();
    let transition: Vec<Vec<f64>> = (0..n_fading)
        .map(|i| cfg.channel.transition.row(i).iter().copied().collect())
        .collect();

    // Axis spans: the mismatch variance is dominated by the all-erasure
    // recursion v' = A² v + (K² N)', and each window slot holds an exact
    // innovation with known variance.
    let mut v_run = k_gain[0] * k_gain[0] * n_inno[0];
    let mut v_max = v_run;
    for k in 1..=horizon {
        v_run = a[k - 1] * a[k - 1] * v_run + k_gain[k] * k_gain[k] * n_inno[k];
        v_max = v_max.max(v_run);
    }
    let e_half = dp_cfg.span_sigmas * v_max.sqrt();
    let nu_sigma_max = n_inno.iter().cloned().fold(0.0, f64::max).sqrt();

    let mut tables = ValueTables {
        grids: Vec::with_capacity(horizon + 2),
        quad,
        cfg: dp_cfg,
        horizon,
        omega_max,
        n_fading,
        a,
        k_gain,
        n_inno,
        p_cov,
        gamma,
        lambda,
        transition,
        e_half,
        nu_sigma_max,
    };

    // Terminal grid: V_{N+1} ≡ 0.
    let mut grids: Vec<ValueGrid> = Vec::with_capacity(horizon + 2);
    grids.push(empty_grid(horizon + 1, &tables));

    for k in (0..=horizon).rev() {
        let grid_next = &grids[grids.len() - 1];
        let grid_k = backup_value(grid_next, k, &tables);
        grids.push(grid_k);
    }
    grids.reverse();
    tables.grids = grids;
    Ok(tables)
}

fn empty_grid(k: usize, t: &ValueTables) -> ValueGrid {
    let e_axis = Axis::symmetric(t.e_half, t.cfg.e_points);
    let nu_axes: Vec<Axis> = (0..t.omega_max)
        .map(|j| {
            let idx = k.saturating_sub(j).min(t.n_inno.len() - 1);
            let sigma = t.n_inno[idx].max(0.0).sqrt();
            Axis::symmetric(
                t.cfg.span_sigmas * sigma.max(t.nu_sigma_max * 1e-9),
                t.cfg.nu_points,
            )
        })
        .collect();
    let mut grid = ValueGrid {
        k,
        e_axis,
        nu_axes,
        slices: Vec::new(),
        n_fading: t.n_fading,
    };
    for tau in 0..=t.omega_max + 1 {
        let wdim = ValueGrid::wdim(tau, t.omega_max);
        let count = grid.node_count(wdim);
        grid.slices.push(TauSlice {
            wdim,
            values: vec![0.0; count],
            decisions: vec![Decision::Tx; count],
        });
    }
    grid
}

/// One backward step: V_k from V_{k+1}. Every node evaluates TX, and RTX
/// where the budget allows, and stores the minimum with its argmin
/// decision (ties transmit).
pub fn backup_value(grid_next: &ValueGrid, k: usize, tables: &ValueTables) -> ValueGrid {
    let mut grid = empty_grid(k, tables);

    for tau in 0..=tables.omega_max + 1 {
        let wdim = ValueGrid::wdim(tau, tables.omega_max);
        let count = grid.node_count(wdim);
        let rtx_allowed = tau >= 1 && tau <= tables.omega_max;

        // Decode flat index -> (e, window, fading) against the fresh grid.
        let e_axis = grid.e_axis.clone();
        let nu_axes = grid.nu_axes.clone();
        let n_fading = grid.n_fading;

        let results: Vec<(f64, Decision)> = (0..count)
            .into_par_iter()
            .map(|flat| {
                let fading = flat % n_fading;
                let mut rest = flat / n_fading;
                let mut window = [0.0f64; 16];
                for j in (0..wdim).rev() {
                    window[j] = nu_axes[j].coord(rest % nu_axes[j].n);
                    rest /= nu_axes[j].n;
                }
                let e = e_axis.coord(rest);

                let q_tx = tables.q_value(
                    grid_next,
                    k,
                    Decision::Tx,
                    e,
                    &window[..wdim],
                    tau,
                    fading,
                    false,
                );
                if rtx_allowed {
                    let q_rtx = tables.q_value(
                        grid_next,
                        k,
                        Decision::Rtx,
                        e,
                        &window[..wdim],
                        tau,
                        fading,
                        false,
                    );
                    if q_rtx - q_tx >= -TIE_TOL {
                        (q_tx, Decision::Tx)
                    } else {
                        (q_rtx, Decision::Rtx)
                    }
                } else {
                    (q_tx, Decision::Tx)
                }
            })
            .collect();

        let slice = &mut grid.slices[tau];
        for (i, (v, d)) in results.into_iter().enumerate() {
            slice.values[i] = v;
            slice.decisions[i] = d;
        }
    }
    grid
}

/// The exact decision residual at encoder state (ẽ, window, τ, fading) and
/// time k — the continuation-value part of Q_RTX − Q_TX, each of the four
/// conditional expectations evaluated with the same propagation and
/// quadrature as the backup:
///
/// Δ_k = λ(ω)·E[V|RTX, γ=0] − λ(0)·E[V|TX, γ=0]
///     + (1−λ(ω))·E[V|RTX, γ=1] − (1−λ(0))·E[V|TX, γ=1].
///
/// The two failure continuations differ only through the protocol clock
/// (a failed fresh transmission restarts it, a failed retransmission
/// extends it); when they coincide the expression reduces to the
/// three-term form (λ(ω)−λ(0))·E[V|γ=0] − (1−λ(0))·E[V|TX,γ=1]
/// + (1−λ(ω))·E[V|RTX,γ=1].
pub fn exact_delta(
    tables: &ValueTables,
    k: usize,
    e_tilde: f64,
    window: &[f64],
    tau: usize,
    fading: usize,
    spec: &ChannelSpec,
) -> Result<f64> {
    if k > tables.horizon {
        return Err(Error::IndexOutOfRange(format!(
            "delta requested at k={k} beyond horizon {}",
            tables.horizon
        )));
    }
    if tau == 0 || tau > tables.omega_max {
        return Err(Error::Protocol(format!(
            "delta requested in a forced state (tau={tau})"
        )));
    }
    if window.len() < tau {
        return Err(Error::Protocol(format!(
            "delta requested with window of {} < tau = {tau}",
            window.len()
        )));
    }
    let grid_next = &tables.grids[k + 1];
    let lam0 = spec.lambda(fading, 0);
    let lam_w = spec.lambda(fading, tau);
    let drift = tables.a_at(k) * e_tilde;
    let eps = tables.epsilon(k, tau, window);

    let e_tx_fail = tables.branch_expectation(grid_next, k, fading, drift, 1, window, false, false);
    let e_rtx_fail =
        tables.branch_expectation(grid_next, k, fading, drift, tau + 1, window, false, false);
    let e_tx_succ = tables.branch_expectation(grid_next, k, fading, 0.0, 0, &[], false, false);
    let e_rtx_succ = tables.branch_expectation(grid_next, k, fading, eps, 0, &[], false, false);

    Ok(
        lam_w * e_rtx_fail - lam0 * e_tx_fail + (1.0 - lam_w) * e_rtx_succ
            - (1.0 - lam0) * e_tx_succ,
    )
}

/// Action-value gap Q_RTX − Q_TX at an arbitrary state, used to audit the
/// decomposition Ω_k = one-step terms + Δ_k against the backup.
#[allow(clippy::too_many_arguments)]
pub fn action_value_gap(
    tables: &ValueTables,
    k: usize,
    e_tilde: f64,
    window: &[f64],
    tau: usize,
    fading: usize,
) -> f64 {
    let grid_next = &tables.grids[k + 1];
    let q_tx = tables.q_value(
        grid_next,
        k,
        Decision::Tx,
        e_tilde,
        window,
        tau,
        fading,
        false,
    );
    let q_rtx = tables.q_value(
        grid_next,
        k,
        Decision::Rtx,
        e_tilde,
        window,
        tau,
        fading,
        false,
    );
    q_rtx - q_tx
}

/// Per-node argmin decisions of a built grid.
pub fn decision_map(grid: &ValueGrid) -> Vec<NodeRecord> {
    grid.nodes()
}

/// Decisions at time k with the continuation value zeroed inside the
/// comparison — the one-step lookahead map, evaluated through the same
/// branch machinery as the full backup.
pub fn decision_map_one_step(tables: &ValueTables, k: usize) -> Vec<NodeRecord> {
    let grid = &tables.grids[k];
    let grid_next = &tables.grids[k + 1];
    grid.nodes()
        .into_iter()
        .map(|mut node| {
            if node.tau >= 1 && node.tau <= tables.omega_max {
                let q_tx = tables.q_value(
                    grid_next,
                    k,
                    Decision::Tx,
                    node.e_tilde,
                    &node.window,
                    node.tau,
                    node.fading,
                    true,
                );
                let q_rtx = tables.q_value(
                    grid_next,
                    k,
                    Decision::Rtx,
                    node.e_tilde,
                    &node.window,
                    node.tau,
                    node.fading,
                    true,
                );
                node.decision = if q_rtx - q_tx >= -TIE_TOL {
                    Decision::Tx
                } else {
                    Decision::Rtx
                };
            } else {
                node.decision = Decision::Tx;
            }
            node
        })
        .collect()
}

/// Closed-form sign of the one-step statistic at a node:
/// (λ(ω)−λ(0))·Γ_{k+1}(Aẽ)² + (1−λ(ω))·Γ_{k+1}ε², ties transmit.
pub fn one_step_decision(
    tables: &ValueTables,
    k: usize,
    e_tilde: f64,
    window: &[f64],
    tau: usize,
    fading: usize,
) -> Decision {
    if tau == 0 || tau > tables.omega_max {
        return Decision::Tx;
    }
    let lam0 = tables.lambda_at(fading, 0);
    let lam_w = tables.lambda_at(fading, tau);
    let gamma_next = tables.gamma[k + 1];
    let drift = tables.a_at(k) * e_tilde;
    let eps = tables.epsilon(k, tau, window);
    let omega =
        (lam_w - lam0) * gamma_next * drift * drift + (1.0 - lam_w) * gamma_next * eps * eps;
    if omega >= -TIE_TOL {
        Decision::Tx
    } else {
        Decision::Rtx
    }
}

/// Forward-simulate the encoder statistic chain under the one-step rule and
/// report how often the exact (DP) rule agrees at free decision points.
/// Report-only: the approximation carries no guarantee.
pub fn lookahead_agreement(
    tables: &ValueTables,
    spec: &ChannelSpec,
    runs: usize,
    seed: u64,
) -> (usize, usize) {
    use rand::Rng;
    use rand_distr::StandardNormal;

    let mut agree = 0usize;
    let mut total = 0usize;
    for run in 0..runs {
        let mut rng = crate::rng::substream(seed, run as u64, crate::rng::Substream::Erasure);
        let mut nrng =
            crate::rng::substream(seed, run as u64, crate::rng::Substream::MeasurementNoise);
        let mut frng = crate::rng::substream(seed, run as u64, crate::rng::Substream::Fading);

        let mut fading = spec.initial_state;
        let mut tau = 0usize;
        let mut window: Vec<f64> = Vec::new();
        let nu0: f64 = nrng.sample::<f64, _>(StandardNormal) * tables.n_inno[0].sqrt();
        let mut e = tables.k_gain[0] * nu0;
        window.insert(0, nu0);

        for k in 0..tables.horizon {
            let free = tau >= 1 && tau <= tables.omega_max;
            let decision = if free {
                let one_step = one_step_decision(tables, k, e, &window, tau, fading);
                let gap = action_value_gap(tables, k, e, &window, tau, fading);
                let exact = if gap >= -TIE_TOL {
                    Decision::Tx
                } else {
                    Decision::Rtx
                };
                total += 1;
                agree += (one_step == exact) as usize;
                one_step
            } else {
                Decision::Tx
            };
            let lam = match decision {
                Decision::Tx => tables.lambda_at(fading, 0),
                Decision::Rtx => tables.lambda_at(fading, tau),
            };
            let gamma = rng.random::<f64>() >= lam;
            let sigma = tables.n_inno[(k + 1).min(tables.n_inno.len() - 1)].sqrt();
            let nu_next: f64 = nrng.sample::<f64, _>(StandardNormal) * sigma;
            e = match (decision, gamma) {
                (Decision::Tx, true) => tables.k_at(k + 1) * nu_next,
                (Decision::Rtx, true) => {
                    tables.epsilon(k, tau, &window) + tables.k_at(k + 1) * nu_next
                }
                (_, false) => tables.a_at(k) * e + tables.k_at(k + 1) * nu_next,
            };
            tau = match (decision, gamma) {
                (Decision::Tx, false) => 1,
                (Decision::Rtx, false) => tau + 1,
                (_, true) => 0,
            };
            window.insert(0, nu_next);
            window.truncate(tables.omega_max.max(1));

            // Fading transition.
            let u: f64 = frng.random();
            let row = &tables.transition[fading];
            let mut acc = 0.0;
            let mut next = row.len() - 1;
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    next = j;
                    break;
                }
            }
            fading = next;
        }
    }
    (agree, total)
}

/// Write every grid node of every time step as CSV.
pub fn write_tables_csv<W: std::io::Write>(
    tables: &ValueTables,
    mut out: W,
) -> std::io::Result<()> {
    write!(out, "k,tau,fading,e_tilde")?;
    for j in 0..tables.omega_max {
        write!(out, ",nu_{j}")?;
    }
    writeln!(out, ",value,decision")?;
    for grid in &tables.grids {
        for node in grid.nodes() {
            write!(
                out,
                "{},{},{},{}",
                node.k, node.tau, node.fading, node.e_tilde
            )?;
            for j in 0..tables.omega_max {
                match node.window.get(j) {
                    Some(v) => write!(out, ",{v}")?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out, ",{},{}", node.value, node.decision)?;
        }
    }
    Ok(())
}
