//! Scenario data model shared by every other module.
//!
//! A scenario bundles the linear process model, the quadratic cost weights,
//! the erasure-channel description, the horizon, and the run controls
//! (seed, run count, switching policy). Scenarios are loaded from a JSON
//! document, validated once, and then treated as immutable.
//!
//! Matrices may be given once (time-invariant) or as per-step schedules
//! (`A_schedule` etc.); time-invariant entries are stored once and indexed,
//! never replicated across the horizon.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Tolerance for "rows of a stochastic matrix sum to one".
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Eigenvalue floor for positive semi-definiteness checks.
pub const PSD_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

/// A per-step quantity that is either constant or explicitly scheduled.
///
/// Indexing a `Constant` returns the same entry for every step, so a
/// time-invariant scenario with a long horizon costs one matrix, not N.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule<T> {
    Constant(T),
    PerStep(Vec<T>),
}

impl<T> Schedule<T> {
    pub fn at(&self, k: usize) -> &T {
        match self {
            Schedule::Constant(v) => v,
            Schedule::PerStep(vs) => &vs[k],
        }
    }

    pub fn is_time_varying(&self) -> bool {
        matches!(self, Schedule::PerStep(_))
    }

    /// Number of scheduled entries, if per-step.
    pub fn scheduled_len(&self) -> Option<usize> {
        match self {
            Schedule::Constant(_) => None,
            Schedule::PerStep(vs) => Some(vs.len()),
        }
    }
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Linear process and sensor model with Gaussian disturbances.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    /// State matrix, n x n per step.
    pub a: Schedule<DMatrix<f64>>,
    /// Input matrix, n x m per step.
    pub b: Schedule<DMatrix<f64>>,
    /// Output matrix, p x n per step.
    pub c: Schedule<DMatrix<f64>>,
    /// Process-noise covariance, n x n per step.
    pub w: Schedule<DMatrix<f64>>,
    /// Measurement-noise covariance, p x p per step.
    pub v: Schedule<DMatrix<f64>>,
    /// Mean of the initial state.
    pub m0: DVector<f64>,
    /// Covariance of the initial state.
    pub m0_cov: DMatrix<f64>,
}

impl SystemModel {
    pub fn state_dim(&self) -> usize {
        self.a.at(0).nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.at(0).ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.at(0).nrows()
    }

    pub fn time_varying(&self) -> bool {
        self.a.is_time_varying()
            || self.b.is_time_varying()
            || self.c.is_time_varying()
            || self.w.is_time_varying()
            || self.v.is_time_varying()
    }

    pub fn a_at(&self, k: usize) -> &DMatrix<f64> {
        self.a.at(k)
    }
    pub fn b_at(&self, k: usize) -> &DMatrix<f64> {
        self.b.at(k)
    }
    pub fn c_at(&self, k: usize) -> &DMatrix<f64> {
        self.c.at(k)
    }
    pub fn w_at(&self, k: usize) -> &DMatrix<f64> {
        self.w.at(k)
    }
    pub fn v_at(&self, k: usize) -> &DMatrix<f64> {
        self.v.at(k)
    }
}

/// Quadratic stage and terminal cost weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    /// State weight, n x n for k = 0..N+1.
    pub q: Schedule<DMatrix<f64>>,
    /// Control weight, m x m for k = 0..N.
    pub r: Schedule<DMatrix<f64>>,
}

impl CostSpec {
    pub fn q_at(&self, k: usize) -> &DMatrix<f64> {
        self.q.at(k)
    }
    pub fn r_at(&self, k: usize) -> &DMatrix<f64> {
        self.r.at(k)
    }
}

/// One fading state: the packet error rate after s retransmissions,
/// `lambda[s]` for s = 0..s_max.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadingState {
    pub lambda: Vec<f64>,
}

/// Erasure-channel description: retransmission cap, fading chain, and the
/// per-state error-rate tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    /// Maximum number of retransmissions per measurement.
    pub omega_max: usize,
    /// Fading states, each carrying an error-rate table.
    pub fading: Vec<FadingState>,
    /// Row-stochastic transition matrix over fading states.
    pub transition: DMatrix<f64>,
    /// Index of the initial fading state.
    pub initial_state: usize,
}

impl ChannelSpec {
    /// Single-state (constant-rate) channel, the common experimental setup.
    pub fn constant_rates(lambda: Vec<f64>, omega_max: usize) -> Self {
        ChannelSpec {
            omega_max,
            fading: vec![FadingState { lambda }],
            transition: DMatrix::from_element(1, 1, 1.0),
            initial_state: 0,
        }
    }

    /// Error rate after `s` retransmissions in fading state `state`,
    /// clamped to the last tabulated rate.
    pub fn lambda(&self, state: usize, s: usize) -> f64 {
        let table = &self.fading[state].lambda;
        table[s.min(table.len() - 1)]
    }

    pub fn num_states(&self) -> usize {
        self.fading.len()
    }
}

/// Switching policy selector.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Policy {
    /// Threshold rule with the one-step lookahead residual (default).
    #[default]
    HarqOptimal,
    /// Threshold rule with the exact residual from the DP oracle
    /// (scalar scenarios only).
    HarqOptimalExactDelta,
    /// Never retransmit.
    AlwaysTx,
    /// Retransmit with probability p whenever allowed.
    Random(f64),
    /// Retransmit whenever 1 <= tau <= min(d, omega_max).
    AgeThreshold(usize),
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::HarqOptimal => write!(f, "harq_optimal"),
            Policy::HarqOptimalExactDelta => write!(f, "harq_optimal_exact_delta"),
            Policy::AlwaysTx => write!(f, "always_tx"),
            Policy::Random(p) => write!(f, "random({p})"),
            Policy::AgeThreshold(d) => write!(f, "age_threshold({d})"),
        }
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        match s {
            "harq_optimal" => return Ok(Policy::HarqOptimal),
            "harq_optimal_exact_delta" => return Ok(Policy::HarqOptimalExactDelta),
            "always_tx" => return Ok(Policy::AlwaysTx),
            _ => {}
        }
        if let Some(arg) = s.strip_prefix("random(").and_then(|r| r.strip_suffix(')')) {
            let p: f64 = arg
                .trim()
                .parse()
                .map_err(|_| format!("bad probability in policy `{s}`"))?;
            return Ok(Policy::Random(p));
        }
        if let Some(arg) = s
            .strip_prefix("age_threshold(")
            .and_then(|r| r.strip_suffix(')'))
        {
            let d: usize = arg
                .trim()
                .parse()
                .map_err(|_| format!("bad age in policy `{s}`"))?;
            return Ok(Policy::AgeThreshold(d));
        }
        Err(format!(
            "unknown policy `{s}` (expected harq_optimal, harq_optimal_exact_delta, \
             always_tx, random(p), or age_threshold(d))"
        ))
    }
}

impl Serialize for Policy {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Policy {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Complete, validated experiment description. Immutable after load; safe to
/// share across simulation workers.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub system: SystemModel,
    pub cost: CostSpec,
    pub channel: ChannelSpec,
    /// Horizon N; controls run at k = 0..N, terminal cost at N+1.
    pub horizon: usize,
    pub seed: u64,
    pub runs: usize,
    pub policy: Policy,
    /// Permits zero noise covariances so degenerate fixtures can assert
    /// exact arithmetic.
    pub test_mode: bool,
}

impl ScenarioConfig {
    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }
    pub fn input_dim(&self) -> usize {
        self.system.input_dim()
    }
    pub fn output_dim(&self) -> usize {
        self.system.output_dim()
    }

    /// True when the state and output are scalar (n = p = 1), the
    /// precondition for the DP oracle. The input dimension never enters
    /// the decision chain, so it is unconstrained.
    pub fn is_scalar(&self) -> bool {
        self.state_dim() == 1 && self.output_dim() == 1
    }

    /// Canonical JSON document for this scenario.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RawScenario::from_config(self))
            .expect("scenario serialization cannot fail")
    }

    /// SHA-256 of the canonical document, hex-encoded. Embedded in every
    /// emitted file header so outputs are traceable to their inputs.
    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A single validation failure: which field, which rule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

pub(crate) fn format_violations(vs: &[Violation]) -> String {
    vs.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

// ---------------------------------------------------------------------------
// JSON document form
// ---------------------------------------------------------------------------

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Serialize, Deserialize)]
struct RawSystem {
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    a: Option<Rows>,
    #[serde(
        rename = "A_schedule",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    a_schedule: Option<Vec<Rows>>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    b: Option<Rows>,
    #[serde(
        rename = "B_schedule",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    b_schedule: Option<Vec<Rows>>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    c: Option<Rows>,
    #[serde(
        rename = "C_schedule",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    c_schedule: Option<Vec<Rows>>,
    #[serde(rename = "W", default, skip_serializing_if = "Option::is_none")]
    w: Option<Rows>,
    #[serde(
        rename = "W_schedule",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    w_schedule: Option<Vec<Rows>>,
    #[serde(rename = "V", default, skip_serializing_if = "Option::is_none")]
    v: Option<Rows>,
    #[serde(
        rename = "V_schedule",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    v_schedule: Option<Vec<Rows>>,
    m0: Vec<f64>,
    #[serde(rename = "M0")]
    m0_cov: Rows,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawCost {
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    q: Option<Rows>,
    #[serde(
        rename = "Q_schedule",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    q_schedule: Option<Vec<Rows>>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    r: Option<Rows>,
    #[serde(
        rename = "R_schedule",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    r_schedule: Option<Vec<Rows>>,
}

fn default_transition() -> Option<Rows> {
    None
}

#[derive(Debug, Serialize, Deserialize)]
struct RawChannel {
    omega_max: usize,
    fading: Vec<FadingState>,
    /// Defaults to the single absorbing state [[1.0]] when omitted.
    #[serde(
        default = "default_transition",
        skip_serializing_if = "Option::is_none"
    )]
    transition: Option<Rows>,
    #[serde(default)]
    initial_state: usize,
}

fn default_runs() -> usize {
    1
}

#[derive(Debug, Serialize, Deserialize)]
struct RawScenario {
    system: RawSystem,
    cost: RawCost,
    channel: RawChannel,
    horizon: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_runs")]
    runs: usize,
    #[serde(default)]
    policy: Policy,
    #[serde(default)]
    test_mode: bool,
}

fn matrix_from_rows(field: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Parse(format!("{field}: empty matrix")));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(Error::Parse(format!("{field}: empty matrix row")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse(format!("{field}: ragged matrix rows")));
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.iter().flatten().copied(),
    ))
}

fn rows_from_matrix(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn schedule_from_raw(
    field: &str,
    single: &Option<Rows>,
    scheduled: &Option<Vec<Rows>>,
) -> Result<Schedule<DMatrix<f64>>> {
    match (single, scheduled) {
        (Some(rows), None) => Ok(Schedule::Constant(matrix_from_rows(field, rows)?)),
        (None, Some(entries)) => {
            let mats = entries
                .iter()
                .enumerate()
                .map(|(i, rows)| matrix_from_rows(&format!("{field}_schedule[{i}]"), rows))
                .collect::<Result<Vec<_>>>()?;
            if mats.is_empty() {
                return Err(Error::Parse(format!("{field}_schedule: empty schedule")));
            }
            Ok(Schedule::PerStep(mats))
        }
        (Some(_), Some(_)) => Err(Error::Parse(format!(
            "{field}: give either `{field}` or `{field}_schedule`, not both"
        ))),
        (None, None) => Err(Error::Parse(format!("{field}: missing"))),
    }
}

fn schedule_to_raw(sched: &Schedule<DMatrix<f64>>) -> (Option<Rows>, Option<Vec<Rows>>) {
    match sched {
        Schedule::Constant(m) => (Some(rows_from_matrix(m)), None),
        Schedule::PerStep(ms) => (None, Some(ms.iter().map(rows_from_matrix).collect())),
    }
}

impl RawScenario {
    fn into_config(self) -> Result<ScenarioConfig> {
        let a = schedule_from_raw("system.A", &self.system.a, &self.system.a_schedule)?;
        let b = schedule_from_raw("system.B", &self.system.b, &self.system.b_schedule)?;
        let c = schedule_from_raw("system.C", &self.system.c, &self.system.c_schedule)?;
        let w = schedule_from_raw("system.W", &self.system.w, &self.system.w_schedule)?;
        let v = schedule_from_raw("system.V", &self.system.v, &self.system.v_schedule)?;
        let q = schedule_from_raw("cost.Q", &self.cost.q, &self.cost.q_schedule)?;
        let r = schedule_from_raw("cost.R", &self.cost.r, &self.cost.r_schedule)?;
        let m0 = DVector::from_vec(self.system.m0.clone());
        let m0_cov = matrix_from_rows("system.M0", &self.system.m0_cov)?;

        let transition = match &self.channel.transition {
            Some(rows) => matrix_from_rows("channel.transition", rows)?,
            None => DMatrix::from_element(1, 1, 1.0),
        };

        Ok(ScenarioConfig {
            system: SystemModel {
                a,
                b,
                c,
                w,
                v,
                m0,
                m0_cov,
            },
            cost: CostSpec { q, r },
            channel: ChannelSpec {
                omega_max: self.channel.omega_max,
                fading: self.channel.fading,
                transition,
                initial_state: self.channel.initial_state,
            },
            horizon: self.horizon,
            seed: self.seed,
            runs: self.runs,
            policy: self.policy,
            test_mode: self.test_mode,
        })
    }

    fn from_config(cfg: &ScenarioConfig) -> RawScenario {
        let (a, a_schedule) = schedule_to_raw(&cfg.system.a);
        let (b, b_schedule) = schedule_to_raw(&cfg.system.b);
        let (c, c_schedule) = schedule_to_raw(&cfg.system.c);
        let (w, w_schedule) = schedule_to_raw(&cfg.system.w);
        let (v, v_schedule) = schedule_to_raw(&cfg.system.v);
        let (q, q_schedule) = schedule_to_raw(&cfg.cost.q);
        let (r, r_schedule) = schedule_to_raw(&cfg.cost.r);
        RawScenario {
            system: RawSystem {
                a,
                a_schedule,
                b,
                b_schedule,
                c,
                c_schedule,
                w,
                w_schedule,
                v,
                v_schedule,
                m0: cfg.system.m0.iter().copied().collect(),
                m0_cov: rows_from_matrix(&cfg.system.m0_cov),
            },
            cost: RawCost {
                q,
                q_schedule,
                r,
                r_schedule,
            },
            channel: RawChannel {
                omega_max: cfg.channel.omega_max,
                fading: cfg.channel.fading.clone(),
                transition: Some(rows_from_matrix(&cfg.channel.transition)),
                initial_state: cfg.channel.initial_state,
            },
            horizon: cfg.horizon,
            seed: cfg.seed,
            runs: cfg.runs,
            policy: cfg.policy,
            test_mode: cfg.test_mode,
        }
    }
}

// ---------------------------------------------------------------------------
// Loading and validation
// ---------------------------------------------------------------------------

/// Parse a scenario document from a JSON string and validate it.
pub fn parse_scenario(json: &str) -> Result<ScenarioConfig> {
    let raw: RawScenario = serde_json::from_str(json).map_err(|e| Error::Parse(e.to_string()))?;
    let cfg = raw.into_config()?;
    let violations = validate_scenario(&cfg);
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Validation(violations))
    }
}

/// Load a scenario document from disk and validate it.
pub fn load_scenario<P: AsRef<Path>>(path: P) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.as_ref().display())))?;
    parse_scenario(&text)
}

fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = 1.0 + m.amax();
    (m - m.transpose()).amax() <= 1e-12 * scale
}

struct MatrixRule {
    symmetric: bool,
    /// Some(true): positive definite; Some(false): positive semi-definite.
    definite: Option<bool>,
}

fn check_matrix(
    out: &mut Vec<Violation>,
    field: &str,
    m: &DMatrix<f64>,
    rows: usize,
    cols: usize,
    rule: MatrixRule,
) {
    if m.nrows() != rows || m.ncols() != cols {
        out.push(Violation {
            field: field.to_string(),
            rule: format!("expected {rows}x{cols}, got {}x{}", m.nrows(), m.ncols()),
        });
        return;
    }
    if rule.symmetric && !is_symmetric(m) {
        out.push(Violation {
            field: field.to_string(),
            rule: "not symmetric".to_string(),
        });
        return;
    }
    match rule.definite {
        Some(true) => {
            if min_symmetric_eigenvalue(m) <= 0.0 {
                out.push(Violation {
                    field: field.to_string(),
                    rule: "not positive definite".to_string(),
                });
            }
        }
        Some(false) => {
            let scale = 1.0 + m.amax();
            if min_symmetric_eigenvalue(m) < -PSD_TOL * scale {
                out.push(Violation {
                    field: field.to_string(),
                    rule: "not positive semi-definite".to_string(),
                });
            }
        }
        None => {}
    }
}

fn for_each_entry<F: FnMut(&str, &DMatrix<f64>)>(
    field: &str,
    sched: &Schedule<DMatrix<f64>>,
    mut f: F,
) {
    match sched {
        Schedule::Constant(m) => f(field, m),
        Schedule::PerStep(ms) => {
            for (i, m) in ms.iter().enumerate() {
                f(&format!("{field}_schedule[{i}]"), m);
            }
        }
    }
}

fn check_schedule_len(
    out: &mut Vec<Violation>,
    field: &str,
    sched: &Schedule<DMatrix<f64>>,
    expected: usize,
) {
    if let Some(len) = sched.scheduled_len() {
        if len != expected {
            out.push(Violation {
                field: format!("{field}_schedule"),
                rule: format!("expected {expected} entries, got {len}"),
            });
        }
    }
}

/// Check every data-model invariant. Returns an empty list iff the scenario
/// is well formed; each entry names the offending field and the broken rule.
/// Deterministic and side-effect free.
pub fn validate_scenario(cfg: &ScenarioConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = cfg.system.a.at(0).nrows();
    let m = cfg.system.b.at(0).ncols();
    let p = cfg.system.c.at(0).nrows();

    if cfg.horizon < 1 {
        out.push(Violation {
            field: "horizon".into(),
            rule: "must be >= 1".into(),
        });
    }
    if cfg.runs < 1 {
        out.push(Violation {
            field: "runs".into(),
            rule: "must be >= 1".into(),
        });
    }

    // Dimension consistency across all scheduled entries.
    let none = MatrixRule {
        symmetric: false,
        definite: None,
    };
    for_each_entry("system.A", &cfg.system.a, |f, mat| {
        check_matrix(&mut out, f, mat, n, n, MatrixRule { ..none })
    });
    for_each_entry("system.B", &cfg.system.b, |f, mat| {
        check_matrix(&mut out, f, mat, n, m, MatrixRule { ..none })
    });
    for_each_entry("system.C", &cfg.system.c, |f, mat| {
        check_matrix(&mut out, f, mat, p, n, MatrixRule { ..none })
    });

    // Noise covariances: SPD, or PSD when test mode permits exact fixtures.
    let cov_rule = || MatrixRule {
        symmetric: true,
        definite: Some(!cfg.test_mode),
    };
    for_each_entry("system.W", &cfg.system.w, |f, mat| {
        check_matrix(&mut out, f, mat, n, n, cov_rule())
    });
    for_each_entry("system.V", &cfg.system.v, |f, mat| {
        check_matrix(&mut out, f, mat, p, p, cov_rule())
    });

    if cfg.system.m0.len() != n {
        out.push(Violation {
            field: "system.m0".into(),
            rule: format!("expected length {n}, got {}", cfg.system.m0.len()),
        });
    }
    check_matrix(
        &mut out,
        "system.M0",
        &cfg.system.m0_cov,
        n,
        n,
        MatrixRule {
            symmetric: true,
            definite: Some(false),
        },
    );

    for_each_entry("cost.Q", &cfg.cost.q, |f, mat| {
        check_matrix(
            &mut out,
            f,
            mat,
            n,
            n,
            MatrixRule {
                symmetric: true,
                definite: Some(false),
            },
        )
    });
    for_each_entry("cost.R", &cfg.cost.r, |f, mat| {
        check_matrix(
            &mut out,
            f,
            mat,
            m,
            m,
            MatrixRule {
                symmetric: true,
                definite: Some(true),
            },
        )
    });

    // Schedule lengths: process/output matrices cover k = 0..N, the state
    // weight additionally covers the terminal index N+1.
    let nsteps = cfg.horizon + 1;
    check_schedule_len(&mut out, "system.A", &cfg.system.a, nsteps);
    check_schedule_len(&mut out, "system.B", &cfg.system.b, nsteps);
    check_schedule_len(&mut out, "system.C", &cfg.system.c, nsteps);
    check_schedule_len(&mut out, "system.W", &cfg.system.w, nsteps);
    check_schedule_len(&mut out, "system.V", &cfg.system.v, nsteps);
    check_schedule_len(&mut out, "cost.Q", &cfg.cost.q, nsteps + 1);
    check_schedule_len(&mut out, "cost.R", &cfg.cost.r, nsteps);

    // Channel invariants.
    let ch = &cfg.channel;
    if ch.fading.is_empty() {
        out.push(Violation {
            field: "channel.fading".into(),
            rule: "at least one fading state required".into(),
        });
        return out;
    }
    for (i, state) in ch.fading.iter().enumerate() {
        if state.lambda.len() < ch.omega_max + 1 {
            out.push(Violation {
                field: format!("channel.fading[{i}].lambda"),
                rule: format!(
                    "table must cover s = 0..omega_max ({} entries), got {}",
                    ch.omega_max + 1,
                    state.lambda.len()
                ),
            });
        }
        for (s, &lam) in state.lambda.iter().enumerate() {
            if !(0.0..=1.0).contains(&lam) {
                out.push(Violation {
                    field: format!("channel.fading[{i}].lambda[{s}]"),
                    rule: format!("error rate {lam} outside [0, 1]"),
                });
            }
        }
    }
    let ns = ch.fading.len();
    if ch.transition.nrows() != ns || ch.transition.ncols() != ns {
        out.push(Violation {
            field: "channel.transition".into(),
            rule: format!(
                "expected {ns}x{ns}, got {}x{}",
                ch.transition.nrows(),
                ch.transition.ncols()
            ),
        });
    } else {
        for i in 0..ns {
            let row = ch.transition.row(i);
            if row.iter().any(|&x| x < 0.0) {
                out.push(Violation {
                    field: format!("channel.transition[{i}]"),
                    rule: "negative transition probability".into(),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                out.push(Violation {
                    field: format!("channel.transition[{i}]"),
                    rule: format!("row sums to {sum}, expected 1"),
                });
            }
        }
    }
    if ch.initial_state >= ns {
        out.push(Violation {
            field: "channel.initial_state".into(),
            rule: format!("index {} out of range (0..{ns})", ch.initial_state),
        });
    }

    match cfg.policy {
        Policy::Random(prob) if !(0.0..=1.0).contains(&prob) => {
            out.push(Violation {
                field: "policy".into(),
                rule: format!("random({prob}): probability outside [0, 1]"),
            });
        }
        Policy::AgeThreshold(0) => {
            out.push(Violation {
                field: "policy".into(),
                rule: "age_threshold(d): d must be >= 1".into(),
            });
        }
        _ => {}
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_fixtures::pendulum_path;

    #[test]
    fn pendulum_scenario_loads_and_validates() {
        let cfg = load_scenario(pendulum_path()).expect("pendulum scenario must load");
        assert_eq!(cfg.state_dim(), 4);
        assert_eq!(cfg.input_dim(), 1);
        assert_eq!(cfg.output_dim(), 2);
        assert_eq!(cfg.horizon, 500);
        assert_eq!(cfg.channel.omega_max, 1);
        assert_eq!(cfg.channel.lambda(0, 0), 0.5);
        assert_eq!(cfg.channel.lambda(0, 1), 0.05);
        assert!(validate_scenario(&cfg).is_empty());
    }

    #[test]
    fn round_trip_preserves_fields() {
        let cfg = load_scenario(pendulum_path()).unwrap();
        let json = cfg.to_json();
        let back = parse_scenario(&json).unwrap();
        assert_eq!(cfg, back);
        // Hash is stable across the round trip.
        assert_eq!(cfg.sha256(), back.sha256());
    }

    #[test]
    fn zero_v_is_rejected_outside_test_mode() {
        let mut cfg = load_scenario(pendulum_path()).unwrap();
        cfg.system.v = Schedule::Constant(DMatrix::zeros(2, 2));
        let violations = validate_scenario(&cfg);
        assert!(
            violations.iter().any(|v| v.field == "system.V"),
            "expected a violation naming system.V, got {violations:?}"
        );
        // The same matrices are fine once exact-fixture mode is on.
        cfg.test_mode = true;
        assert!(validate_scenario(&cfg).is_empty());
    }

    #[test]
    fn stochastic_rows_accepted_and_checked() {
        let mut cfg = load_scenario(pendulum_path()).unwrap();
        cfg.channel.fading = vec![
            FadingState {
                lambda: vec![0.5, 0.05],
            },
            FadingState {
                lambda: vec![0.9, 0.3],
            },
        ];
        cfg.channel.transition = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.2, 0.8]);
        assert!(validate_scenario(&cfg).is_empty());

        cfg.channel.transition = DMatrix::from_row_slice(2, 2, &[0.7, 0.4, 0.2, 0.8]);
        let violations = validate_scenario(&cfg);
        assert!(violations
            .iter()
            .any(|v| v.field == "channel.transition[0]"));
    }

    #[test]
    fn indefinite_q_is_flagged() {
        let mut cfg = load_scenario(pendulum_path()).unwrap();
        let mut q = DMatrix::identity(4, 4);
        q[(0, 0)] = -1.0;
        cfg.cost.q = Schedule::Constant(q);
        let violations = validate_scenario(&cfg);
        assert!(violations
            .iter()
            .any(|v| v.field == "cost.Q" && v.rule.contains("semi-definite")));
    }

    #[test]
    fn out_of_range_lambda_is_flagged() {
        let mut cfg = load_scenario(pendulum_path()).unwrap();
        cfg.channel.fading[0].lambda = vec![0.5, 1.3];
        let violations = validate_scenario(&cfg);
        assert!(violations
            .iter()
            .any(|v| v.field == "channel.fading[0].lambda[1]"));
    }

    #[test]
    fn policy_strings_round_trip() {
        for s in [
            "harq_optimal",
            "harq_optimal_exact_delta",
            "always_tx",
            "random(0.25)",
            "age_threshold(2)",
        ] {
            let p: Policy = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert!("rtx_forever".parse::<Policy>().is_err());
    }

    #[test]
    fn lambda_clamps_past_table_end() {
        let ch = ChannelSpec::constant_rates(vec![0.5, 0.05], 1);
        assert_eq!(ch.lambda(0, 0), 0.5);
        assert_eq!(ch.lambda(0, 1), 0.05);
        assert_eq!(ch.lambda(0, 7), 0.05);
    }

    #[test]
    fn omitted_transition_defaults_to_one_absorbing_state() {
        let doc = r#"{
            "system": {"A": [[1.0]], "B": [[1.0]], "C": [[1.0]],
                        "W": [[1.0]], "V": [[1.0]], "m0": [0.0], "M0": [[1.0]]},
            "cost": {"Q": [[1.0]], "R": [[1.0]]},
            "channel": {"omega_max": 1, "fading": [{"lambda": [0.5, 0.05]}]},
            "horizon": 4
        }"#;
        let cfg = parse_scenario(doc).unwrap();
        assert_eq!(cfg.channel.transition, DMatrix::from_element(1, 1, 1.0));
        assert_eq!(cfg.channel.initial_state, 0);
        assert_eq!(cfg.runs, 1);
        assert_eq!(cfg.policy, Policy::HarqOptimal);
    }

    #[test]
    fn ragged_matrix_is_a_parse_error() {
        let doc = r#"{
            "system": {"A": [[1.0],[2.0,3.0]], "B": [[1.0]], "C": [[1.0]],
                        "W": [[1.0]], "V": [[1.0]], "m0": [0.0], "M0": [[1.0]]},
            "cost": {"Q": [[1.0]], "R": [[1.0]]},
            "channel": {"omega_max": 0, "fading": [{"lambda": [0.5]}]},
            "horizon": 1
        }"#;
        match parse_scenario(doc) {
            Err(Error::Parse(msg)) => assert!(msg.contains("system.A")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
