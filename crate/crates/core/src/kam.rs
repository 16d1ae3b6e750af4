//! Iterative normal-form engine.
//!
//! One step conjugates `H = D(omega) + G + (Id + L)Lambda` by the time-one
//! flow of a generator `S` chosen so that the entire degree <= 0 part of the
//! perturbation (except its constant and the exactly counterterm-shaped
//! kernel, which the counterterm correction absorbs) is cancelled.  The new
//! perturbation is assembled from explicitly quadratic pieces, so the update
//! never subtracts two order-one quantities:
//!
//! ```text
//! G' = const + G^{>=1} + P^{>=1}{S, G^{>=1}} + {S, G^{<=0}} + P^{>=1}(L lam)
//!      + sum_{h>=2} ad_S^h G / h!
//!      + sum_{h>=1} ad_S^h(-L_omega S) / (h+1)!
//!      + sum_{h>=1} ad_S^h(U lam + L lam) / h!
//! ```
//!
//! where `U lam` is the counterterm Hamiltonian and `L lam` its accumulated
//! flow correction.  The generator solves, in order,
//!
//! ```text
//! L_omega S2  = G^(-2,R) + P^(-2,R) L lam
//! L_omega S1  = G^(-1) + P^(-1){S2, G^{>=1}} + P^(-1) L lam
//! (Id + M) lam = -(P^(0K){S2h + S1h, G^{>=1}} + G^(0K))
//! L_omega S0R = G^(0R) + P^(0R)({S2 + S1, G^{>=1}} + L lam)
//! ```
//!
//! with `M` the dense per-mode matrix collecting how a unit counterterm leaks
//! back into the degree-0 kernel through `L` and through the already-solved
//! generator components (each of which is affine in `lam`).

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::centered::{
    extract_counterterm, normal_form_defect, plain_degree_part, to_centered, CounterTerm,
    DegreeSelector, TorusData,
};
use crate::dioph::DiophParams;
use crate::error::{Error, Result};
use crate::homological::{apply_lw, solve_homological};
use crate::index::{Mode, ModeSet};
use crate::poly::{
    diagonal_hamiltonian, poisson_bracket, FrequencyVector, HamiltonianPoly, ModeVector,
    NormParams, PhasePoint,
};

/// Contraction exponent of the quadratic scheme: `log eps_{n+1} <= chi log eps_n + C`.
pub const CONTRACTION_EXPONENT: f64 = 1.5;

/// Measured practical smallness threshold: steps with
/// `eps_n (1 + Theta_n)^5` above this value have been observed to leave the
/// quadratic regime, so the step emits a warning (it still runs).
pub const SMALLNESS_THRESHOLD: f64 = 1e-2;

/// Iteration floor: once `eps_n` drops below this the run stops, since f64
/// round-off in the norm bookkeeping is of comparable size.
pub const EPSILON_FLOOR: f64 = 1e-13;

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

/// Radius/smoothness budget of the iteration.
///
/// Step `n` works on the ball of radius `r_n` with mode weights of exponent
/// `p_n`, where
///
/// ```text
/// rho_n = (rho/6) 2^{-n},   delta_0 = delta/8,  delta_n = 9 delta / (4 pi^2 n^2),
/// r_{n+1} = r_n - 3 rho_n,  p_{n+1} = p_n + 3 delta_n,
/// ```
///
/// so `r_n` decreases to `r_0 - rho` and `p_n` increases to `p_0 + 3 delta/2`
/// (the three homological solves of a step each give away one `delta_n` of
/// smoothing, hence the factors 3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KamSchedule {
    r0: f64,
    rho: f64,
    p0: f64,
    delta: f64,
}

impl KamSchedule {
    /// Requires `r0, rho, delta > 0` and the radius budget `rho <= r0/2`.
    pub fn new(r0: f64, rho: f64, p0: f64, delta: f64) -> Result<Self> {
        if !(r0 > 0.0) || !r0.is_finite() {
            return Err(Error::InvalidInput(format!(
                "schedule needs a positive finite base radius, got r0 = {r0}"
            )));
        }
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::InvalidInput(format!(
                "schedule needs a positive finite radius margin, got rho = {rho}"
            )));
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::InvalidInput(format!(
                "schedule needs a positive finite smoothing budget, got delta = {delta}"
            )));
        }
        if !p0.is_finite() || p0 < 0.0 {
            return Err(Error::InvalidInput(format!(
                "schedule needs a nonnegative finite base exponent, got p0 = {p0}"
            )));
        }
        if rho > r0 / 2.0 {
            return Err(Error::ScheduleRadiusBudget { rho, r0 });
        }
        Ok(Self { r0, rho, p0, delta })
    }

    pub fn r0(&self) -> f64 {
        self.r0
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Radius margin `rho_n` spent by step `n`.
    pub fn step_radius_margin(&self, n: usize) -> f64 {
        self.rho / 6.0 * 0.5f64.powi(n as i32)
    }

    /// Smoothing `delta_n` gained per homological solve in step `n`.
    pub fn step_smoothing(&self, n: usize) -> f64 {
        if n == 0 {
            self.delta / 8.0
        } else {
            9.0 * self.delta / (4.0 * PI * PI * (n as f64) * (n as f64))
        }
    }

    /// Closed form of the recursion `r_{n+1} = r_n - 3 rho_n`.
    pub fn radius(&self, n: usize) -> f64 {
        self.r0 - self.rho * (1.0 - 0.5f64.powi(n as i32))
    }

    /// Partial sum of the recursion `p_{n+1} = p_n + 3 delta_n`.
    pub fn smoothness(&self, n: usize) -> f64 {
        let mut p = self.p0;
        for i in 0..n {
            p += 3.0 * self.step_smoothing(i);
        }
        p
    }

    /// `r_infinity = r0 - rho` (the total radius spent is `sum_n 3 rho_n = rho`).
    pub fn radius_limit(&self) -> f64 {
        self.r0 - self.rho
    }

    /// `p_infinity = p0 + 3 delta/2`, since
    /// `sum_n 3 delta_n = 3 (delta/8 + (9 delta/4 pi^2) pi^2/6) = 3 delta/2`.
    pub fn smoothness_limit(&self) -> f64 {
        self.p0 + 1.5 * self.delta
    }

    /// Largest torus radius the full schedule supports: `r0 / (2 sqrt 2)`.
    pub fn max_torus_radius(&self) -> f64 {
        self.r0 / (2.0 * 2.0f64.sqrt())
    }

    /// Norm parameters `(r_n, p_n)` used by step `n`.
    pub fn norm_params(&self, n: usize) -> Result<NormParams> {
        NormParams::new(self.radius(n), self.smoothness(n))
    }

    /// The torus must fit in the ball of radius `r0/(2 sqrt 2)` measured with
    /// the *final* weight exponent, so that every step's ball contains it.
    pub fn check_torus(&self, torus: &TorusData) -> Result<()> {
        let cap = self.max_torus_radius();
        if torus.r() > cap {
            return Err(Error::TorusOutsideBall {
                sup: torus.r(),
                r: cap,
            });
        }
        let p_inf = self.smoothness_limit();
        let sup = torus
            .actions()
            .map(|(j, i)| i.sqrt() * crate::index::weight_base(j).powf(p_inf))
            .fold(0.0f64, f64::max);
        if sup > cap {
            return Err(Error::TorusOutsideBall { sup, r: cap });
        }
        Ok(())
    }
}

/// Per-step knobs.
#[derive(Debug, Clone, Copy)]
pub struct KamOptions {
    /// Maximum number of nested brackets kept in any Lie series.
    pub order_cap: usize,
    /// Threshold for the `eps_n (1+Theta_n)^5` smallness warning.
    pub smallness_threshold: f64,
}

impl Default for KamOptions {
    fn default() -> Self {
        Self {
            order_cap: 8,
            smallness_threshold: SMALLNESS_THRESHOLD,
        }
    }
}

/// Pipeline knobs.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Maximum number of steps.
    pub steps: usize,
    /// Stop once `eps_n` falls below this floor.
    pub floor: f64,
    pub kam: KamOptions,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            steps: 4,
            floor: EPSILON_FLOOR,
            kam: KamOptions::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Lie series
// ---------------------------------------------------------------------------

/// Truncated Lie series `sum_{h <= order} ad_S^h H / h!` with a tail estimate.
#[derive(Debug, Clone)]
pub struct LieExpansion {
    pub result: HamiltonianPoly,
    /// Coefficient mass of the last bracket order kept; the first omitted
    /// order is expected to be no larger when the terms are decreasing.
    pub tail_estimate: f64,
    /// Number of bracket orders actually accumulated.
    pub orders_used: usize,
}

/// Computes `e^{ad_S} H` truncated at `order_cap` nested brackets.
///
/// The generator must carry no constant term (a constant generates no flow,
/// so its presence signals a bookkeeping mistake upstream).  The series stops
/// early once a term vanishes or falls below the round-off floor; it fails
/// with [`Error::LieSeriesDiverging`] if the term norms stop decreasing while
/// still above that floor.
pub fn lie_transform(
    h: &HamiltonianPoly,
    s: &HamiltonianPoly,
    order_cap: usize,
) -> Result<LieExpansion> {
    h.check_same_mode_set(s)?;
    if s.scalar().norm() != 0.0 {
        return Err(Error::InvalidInput(
            "lie generator has a constant part; constants generate no flow".into(),
        ));
    }
    let mut acc = h.clone();
    let mut term = h.clone();
    let floor = h.one_norm() * 1e-13 + f64::MIN_POSITIVE;
    let mut prev_norm = f64::INFINITY;
    let mut tail = 0.0;
    let mut used = 0;
    for order in 1..=order_cap {
        term = poisson_bracket(s, &term)?.scaled_re(1.0 / order as f64);
        if term.is_zero() {
            tail = 0.0;
            break;
        }
        let norm = term.one_norm();
        if norm >= prev_norm && norm > floor {
            return Err(Error::LieSeriesDiverging {
                order,
                prev: prev_norm,
                next: norm,
            });
        }
        acc = acc.add(&term)?;
        used = order;
        tail = norm;
        if norm <= floor {
            break;
        }
        prev_norm = norm;
    }
    Ok(LieExpansion {
        result: acc,
        tail_estimate: tail,
        orders_used: used,
    })
}

/// Sums `T_1 + T_2 + ...` where `T_0 = seed` (not included) and
/// `T_k = {S, T_{k-1}} / (first_divisor + k - 1)`.
///
/// With `first_divisor = 1` this is `sum_{h>=1} ad_S^h(seed)/h!`; with
/// `first_divisor = 2` and `seed = ad_S X` it is `sum_{h>=2} ad_S^h X / h!`,
/// and with `seed = Y` it is `sum_{h>=1} ad_S^h Y / (h+1)!`.
fn ad_tail(
    s: &HamiltonianPoly,
    seed: &HamiltonianPoly,
    first_divisor: usize,
    max_terms: usize,
) -> Result<HamiltonianPoly> {
    let mut acc = HamiltonianPoly::zero(seed.mode_set().clone(), seed.degree_cap())
        .with_prune_rel(seed.prune_rel());
    let mut term = seed.clone();
    let floor = seed.one_norm() * 1e-13 + f64::MIN_POSITIVE;
    let mut prev_norm = f64::INFINITY;
    for k in 0..max_terms {
        term = poisson_bracket(s, &term)?.scaled_re(1.0 / (first_divisor + k) as f64);
        if term.is_zero() {
            break;
        }
        let norm = term.one_norm();
        if norm >= prev_norm && norm > floor {
            return Err(Error::LieSeriesDiverging {
                order: k + 1,
                prev: prev_norm,
                next: norm,
            });
        }
        acc = acc.add(&term)?;
        if norm <= floor {
            break;
        }
        prev_norm = norm;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// correction operator
// ---------------------------------------------------------------------------

/// Linear map `lambda -> L lambda` recording how the accumulated flows have
/// deformed the counterterm: one polynomial column per site, so that
/// `(Id + L) lambda = U lambda + sum_j lambda_j col_j` with `U lambda` the
/// plain counterterm Hamiltonian.
#[derive(Debug, Clone)]
pub struct CorrectionOperator {
    mode_set: Arc<ModeSet>,
    degree_cap: u32,
    columns: Vec<HamiltonianPoly>,
}

impl CorrectionOperator {
    pub fn zero(mode_set: Arc<ModeSet>, degree_cap: u32) -> Self {
        let columns = mode_set
            .modes()
            .map(|_| HamiltonianPoly::zero(mode_set.clone(), degree_cap))
            .collect();
        Self {
            mode_set,
            degree_cap,
            columns,
        }
    }

    pub fn mode_set(&self) -> &Arc<ModeSet> {
        &self.mode_set
    }

    pub fn degree_cap(&self) -> u32 {
        self.degree_cap
    }

    pub fn column(&self, j: Mode) -> Result<&HamiltonianPoly> {
        let idx = self
            .mode_set
            .site_index(j)
            .ok_or(Error::ModeOutsideSet {
                mode: j,
                m_max: self.mode_set.m_max(),
            })?;
        Ok(&self.columns[idx])
    }

    pub fn columns(&self) -> &[HamiltonianPoly] {
        &self.columns
    }

    pub fn is_zero(&self) -> bool {
        self.columns.iter().all(HamiltonianPoly::is_zero)
    }

    /// `L lambda = sum_j lambda_j col_j`.
    pub fn apply(&self, lambda: &CounterTerm) -> Result<HamiltonianPoly> {
        let mut out = HamiltonianPoly::zero(self.mode_set.clone(), self.degree_cap);
        for (idx, (_, l)) in lambda.iter().enumerate() {
            if l != 0.0 && !self.columns[idx].is_zero() {
                out = out.add(&self.columns[idx].scaled_re(l))?;
            }
        }
        Ok(out)
    }

    /// Largest column norm, `sup_j ||col_j||_{r,p}`.
    pub fn max_column_norm(&self, params: &NormParams) -> f64 {
        self.columns
            .iter()
            .map(|c| c.weighted_norm(params))
            .fold(0.0, f64::max)
    }

    /// Largest columnwise difference `sup_j ||col_j - other_j||_{r,p}`.
    pub fn max_column_delta(&self, other: &Self, params: &NormParams) -> f64 {
        self.columns
            .iter()
            .zip(other.columns.iter())
            .map(|(a, b)| a.sub(b).map(|d| d.weighted_norm(params)).unwrap_or(f64::NAN))
            .fold(0.0, f64::max)
    }

    /// Columnwise conjugation `L' = e^{ad_S}(L + Id) - Id`, computed in the
    /// cancellation-free form `col'_j = col_j + sum_{h>=1} ad_S^h(col_j + U_j)/h!`
    /// where `U_j` is the unit counterterm Hamiltonian of site `j`.
    pub fn updated(
        &self,
        s: &HamiltonianPoly,
        torus: &TorusData,
        order_cap: usize,
    ) -> Result<Self> {
        let mut columns = Vec::with_capacity(self.columns.len());
        for (idx, j) in self.mode_set.modes().enumerate() {
            let unit = CounterTerm::unit(self.mode_set.clone(), j)?
                .to_hamiltonian(torus, self.degree_cap);
            let seed = self.columns[idx].add(&unit)?;
            let mut col = self.columns[idx].add(&ad_tail(s, &seed, 1, order_cap)?)?;
            col.prune();
            columns.push(col);
        }
        Ok(Self {
            mode_set: self.mode_set.clone(),
            degree_cap: self.degree_cap,
            columns,
        })
    }
}

// ---------------------------------------------------------------------------
// counterterm system
// ---------------------------------------------------------------------------

/// Dense linear system `(Id + M) lambda = rhs` on the counterterm vector,
/// with `M` given by columns (the image of each unit counterterm).
#[derive(Debug, Clone)]
pub struct CounterTermSystem {
    mode_set: Arc<ModeSet>,
    columns: Vec<CounterTerm>,
    pub rhs: CounterTerm,
}

impl CounterTermSystem {
    /// `columns[idx]` is `M e_idx` in site order; pass an empty vector for `M = 0`.
    pub fn new(
        mode_set: Arc<ModeSet>,
        columns: Vec<CounterTerm>,
        rhs: CounterTerm,
    ) -> Result<Self> {
        if !columns.is_empty() && columns.len() != mode_set.len() {
            return Err(Error::InvalidInput(format!(
                "counterterm system needs {} columns, got {}",
                mode_set.len(),
                columns.len()
            )));
        }
        Ok(Self {
            mode_set,
            columns,
            rhs,
        })
    }

    /// `||M||_{inf->inf}`: the largest absolute row sum.
    pub fn matrix_norm(&self) -> f64 {
        if self.columns.is_empty() {
            return 0.0;
        }
        let n = self.mode_set.len();
        let mut worst = 0.0f64;
        for row in 0..n {
            let sum: f64 = self
                .columns
                .iter()
                .map(|c| c.values()[row].abs())
                .sum();
            worst = worst.max(sum);
        }
        worst
    }
}

/// Solution of the counterterm system plus its conditioning diagnostics.
#[derive(Debug, Clone)]
pub struct CounterTermSolution {
    pub lambda: CounterTerm,
    pub matrix_norm: f64,
    pub warnings: Vec<String>,
}

/// Solves `(Id + M) lambda = rhs` by Gaussian elimination with partial
/// pivoting.  Requires `||M|| < 1` (a contraction perturbation of the
/// identity); warns when `||M|| > 1/2`, where the perturbative bound on the
/// solution degrades.
pub fn solve_counterterm(system: &CounterTermSystem) -> Result<CounterTermSolution> {
    let m_norm = system.matrix_norm();
    if !m_norm.is_finite() || m_norm >= 1.0 {
        return Err(Error::CountertermNotContracting(m_norm));
    }
    let mut warnings = Vec::new();
    if m_norm > 0.5 {
        warnings.push(format!(
            "counterterm matrix norm {m_norm:e} exceeds 1/2; the solution bound degrades as 1/(1 - ||M||)"
        ));
    }
    let n = system.mode_set.len();
    let b: Vec<f64> = system.rhs.values().to_vec();
    let lambda = if system.columns.is_empty() {
        system.rhs.clone()
    } else {
        let mut a = vec![vec![0.0f64; n]; n];
        for (col_idx, col) in system.columns.iter().enumerate() {
            for (row_idx, v) in col.values().iter().enumerate() {
                a[row_idx][col_idx] = *v;
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += 1.0;
        }
        let x = solve_dense(a, b)?;
        let mut out = CounterTerm::zero(system.mode_set.clone());
        for (idx, j) in system.mode_set.modes().enumerate() {
            out.set(j, x[idx])?;
        }
        out
    };
    Ok(CounterTermSolution {
        lambda,
        matrix_norm: m_norm,
        warnings,
    })
}

/// Gaussian elimination with partial pivoting on a dense square system.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1.0);
    for col in 0..n {
        let (pivot_row, pivot_val) = (col..n)
            .map(|r| (r, a[r][col].abs()))
            .fold((col, 0.0), |best, cand| if cand.1 > best.1 { cand } else { best });
        if pivot_val < 1e-14 * scale {
            return Err(Error::CountertermSingular);
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in col + 1..n {
            acc -= a[col][c] * x[c];
        }
        x[col] = acc / a[col][col];
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// iteration state
// ---------------------------------------------------------------------------

/// State after `n` steps: the perturbation, the counterterm ledger, the
/// accumulated counterterm correction, and the generator history.
#[derive(Debug, Clone)]
pub struct KamState {
    pub n: usize,
    /// Perturbation `G_n`.
    pub g: HamiltonianPoly,
    /// Running solution of `Lambda_{n+1} = Lambda_n - lam_n` from `Lambda_0 = 0`;
    /// the assembled physical counterterm after `n` steps is its negation.
    pub lambda: CounterTerm,
    /// Accumulated correction `L_n`.
    pub correction: CorrectionOperator,
    /// Generators `S_0 .. S_{n-1}` in the order they were applied.
    pub s_history: Vec<HamiltonianPoly>,
    /// `gamma^{-1} (||G^(0K)||_inf + ||G^(0R)|| + ||G^(-2,R)|| + ||G^(-1)||)` at `(r_n, p_n)`.
    pub eps: f64,
    /// `gamma^{-1} ||G^{>=1}|| + eps` at `(r_n, p_n)`.
    pub theta: f64,
}

impl KamState {
    /// Initial state around the given torus; validates the torus against the
    /// schedule and measures `eps_0, Theta_0` at `(r_0, p_0)`.
    pub fn initial(
        g0: HamiltonianPoly,
        torus: &TorusData,
        schedule: &KamSchedule,
        dioph: &DiophParams,
    ) -> Result<Self> {
        schedule.check_torus(torus)?;
        let params = schedule.norm_params(0)?;
        let (eps, theta) = Self::diagnostics(&g0, torus, &params, dioph.gamma)?;
        let ms = g0.mode_set().clone();
        let cap = g0.degree_cap();
        Ok(Self {
            n: 0,
            g: g0,
            lambda: CounterTerm::zero(ms.clone()),
            correction: CorrectionOperator::zero(ms, cap),
            s_history: Vec::new(),
            eps,
            theta,
        })
    }

    /// Recomputes `(eps, Theta)` of a perturbation from scratch.
    pub fn diagnostics(
        g: &HamiltonianPoly,
        torus: &TorusData,
        params: &NormParams,
        gamma: f64,
    ) -> Result<(f64, f64)> {
        let centered = to_centered(g, torus)?;
        let g0 = centered.project_degree(DegreeSelector::Exact(0))?;
        let kernel_norm = extract_counterterm(&g0.kernel_part()).sup_norm();
        let g0r_norm = g0.range_part().weighted_norm(params);
        let g2r_norm = centered
            .project_degree(DegreeSelector::Exact(-2))?
            .range_part()
            .weighted_norm(params);
        let g1_norm = centered
            .project_degree(DegreeSelector::Exact(-1))?
            .weighted_norm(params);
        let eps = (kernel_norm + g0r_norm + g2r_norm + g1_norm) / gamma;
        let high_norm = centered
            .project_degree(DegreeSelector::AtLeastOne)?
            .weighted_norm(params);
        Ok((eps, high_norm / gamma + eps))
    }
}

/// Diagnostics of one step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub n: usize,
    pub eps_before: f64,
    pub theta_before: f64,
    pub eps_after: f64,
    pub theta_after: f64,
    /// Counterterm correction consumed by this step.
    pub lambda_bar: CounterTerm,
    pub lambda_bar_norm: f64,
    /// `||M||_inf` of the counterterm system.
    pub matrix_norm: f64,
    /// Smallest divisor `|omega . l|` met across the homological solves
    /// (infinite if nothing needed solving).
    pub min_divisor: f64,
    /// `||S||_{r_n, p_n + delta_n}`.
    pub generator_norm: f64,
    /// Residual of the degree <= 0 homological identity, measured on the
    /// assembled data (coefficient mass; zero in exact arithmetic).
    pub homological_residual: f64,
    /// `sup_j || col'_j - col_j ||` at the next step's parameters.
    pub correction_delta: f64,
    pub warnings: Vec<String>,
}

fn solve_part(
    src: &HamiltonianPoly,
    omega: &FrequencyVector,
    dioph: &DiophParams,
    params: &NormParams,
    delta: f64,
    min_div: &mut f64,
) -> Result<HamiltonianPoly> {
    if src.is_zero() {
        return Ok(
            HamiltonianPoly::zero(src.mode_set().clone(), src.degree_cap())
                .with_prune_rel(src.prune_rel()),
        );
    }
    let sol = solve_homological(src, omega, dioph, params, delta)?;
    *min_div = min_div.min(sol.min_divisor);
    Ok(sol.f)
}

/// Degree-0 kernel content of a plain polynomial, as a counterterm vector.
fn kernel0_counterterm(h: &HamiltonianPoly, torus: &TorusData) -> Result<CounterTerm> {
    let c = to_centered(h, torus)?;
    Ok(extract_counterterm(
        &c.project_degree(DegreeSelector::Exact(0))?.kernel_part(),
    ))
}

/// `P^(0R)` of a plain polynomial, back in plain form.
fn plain_degree0_range(h: &HamiltonianPoly, torus: &TorusData) -> Result<HamiltonianPoly> {
    Ok(to_centered(h, torus)?
        .project_degree(DegreeSelector::Exact(0))?
        .range_part()
        .to_plain())
}

/// One quadratic step: solves the triangular homological system, conjugates,
/// and reassembles the perturbation without large cancellations.
pub fn kam_step(
    state: &KamState,
    torus: &TorusData,
    omega: &FrequencyVector,
    schedule: &KamSchedule,
    dioph: &DiophParams,
    opts: &KamOptions,
) -> Result<(KamState, StepReport)> {
    let n = state.n;
    let params = schedule.norm_params(n)?;
    let next_params = schedule.norm_params(n + 1)?;
    let delta_n = schedule.step_smoothing(n);
    let ms = state.g.mode_set().clone();
    let cap = state.g.degree_cap();
    let mut warnings = Vec::new();

    if state.eps * (1.0 + state.theta).powi(5) > opts.smallness_threshold {
        warnings.push(format!(
            "smallness check: eps_n (1+Theta_n)^5 = {:e} exceeds the measured threshold {:e}; \
             quadratic decay is not guaranteed for this step",
            state.eps * (1.0 + state.theta).powi(5),
            opts.smallness_threshold
        ));
    }

    // --- split the perturbation by centered degree -------------------------
    let centered = to_centered(&state.g, torus)?;
    let carried_scalar = centered.scalar();
    let g2r = centered
        .project_degree(DegreeSelector::Exact(-2))?
        .range_part()
        .to_plain();
    let g1 = centered.project_degree(DegreeSelector::Exact(-1))?.to_plain();
    let g0 = centered.project_degree(DegreeSelector::Exact(0))?;
    let g0k = extract_counterterm(&g0.kernel_part());
    let g0r = g0.range_part().to_plain();
    let gge1 = centered
        .project_degree(DegreeSelector::AtLeastOne)?
        .to_plain();
    let gle0 = centered
        .project_degree(DegreeSelector::AtMostZero)?
        .to_plain();

    let mut min_div = f64::INFINITY;

    // --- homogeneous chain: S2h, S1h ---------------------------------------
    let s2h = solve_part(&g2r, omega, dioph, &params, delta_n, &mut min_div)?;
    let b2h = poisson_bracket(&s2h, &gge1)?;
    let s1h_src = g1.add(&plain_degree_part(&b2h, torus, DegreeSelector::Exact(-1))?)?;
    let s1h = solve_part(&s1h_src, omega, dioph, &params, delta_n, &mut min_div)?;
    let b1h = poisson_bracket(&s1h, &gge1)?;
    let bh_sum = b2h.add(&b1h)?;

    // --- per-site columns (affine dependence on the counterterm) -----------
    let modes: Vec<Mode> = ms.modes().collect();
    let has_correction = !state.correction.is_zero();
    let mut s2c: Vec<Option<HamiltonianPoly>> = vec![None; modes.len()];
    let mut s1c: Vec<Option<HamiltonianPoly>> = vec![None; modes.len()];
    let mut bc_sum: Vec<Option<HamiltonianPoly>> = vec![None; modes.len()];
    let mut m_columns: Vec<CounterTerm> = Vec::new();
    if has_correction {
        for (idx, &_j) in modes.iter().enumerate() {
            let col = &state.correction.columns()[idx];
            if col.is_zero() {
                m_columns.push(CounterTerm::zero(ms.clone()));
                continue;
            }
            let col_c = to_centered(col, torus)?;
            let col2r = col_c
                .project_degree(DegreeSelector::Exact(-2))?
                .range_part()
                .to_plain();
            let col1 = col_c.project_degree(DegreeSelector::Exact(-1))?.to_plain();
            let col0k = extract_counterterm(
                &col_c.project_degree(DegreeSelector::Exact(0))?.kernel_part(),
            );
            let s2j = solve_part(&col2r, omega, dioph, &params, delta_n, &mut min_div)?;
            let b2j = poisson_bracket(&s2j, &gge1)?;
            let s1j_src =
                col1.add(&plain_degree_part(&b2j, torus, DegreeSelector::Exact(-1))?)?;
            let s1j = solve_part(&s1j_src, omega, dioph, &params, delta_n, &mut min_div)?;
            let b1j = poisson_bracket(&s1j, &gge1)?;
            let bj = b2j.add(&b1j)?;
            let m_col = col0k.add(&kernel0_counterterm(&bj, torus)?);
            s2c[idx] = Some(s2j);
            s1c[idx] = Some(s1j);
            bc_sum[idx] = Some(bj);
            m_columns.push(m_col);
        }
    }

    // --- counterterm equation (Id + M) lam = -rhs ---------------------------
    let rhs_assembled = g0k.add(&kernel0_counterterm(&bh_sum, torus)?);
    let system = CounterTermSystem::new(ms.clone(), m_columns, rhs_assembled.scaled(-1.0))?;
    let matrix_norm = system.matrix_norm();
    let solution = solve_counterterm(&system)?;
    let lambda_bar = solution.lambda;
    warnings.extend(solution.warnings);

    // --- assemble the generator ---------------------------------------------
    let mut s2 = s2h;
    let mut s1 = s1h;
    let mut bracket_low = bh_sum; // {S2 + S1, G^{>=1}}
    for (idx, _) in modes.iter().enumerate() {
        let l = lambda_bar.values()[idx];
        if l == 0.0 {
            continue;
        }
        if let Some(p) = &s2c[idx] {
            s2 = s2.add(&p.scaled_re(l))?;
        }
        if let Some(p) = &s1c[idx] {
            s1 = s1.add(&p.scaled_re(l))?;
        }
        if let Some(p) = &bc_sum[idx] {
            bracket_low = bracket_low.add(&p.scaled_re(l))?;
        }
    }
    let lam_unit_h = lambda_bar.to_hamiltonian(torus, cap);
    let lcorr_lam = state.correction.apply(&lambda_bar)?;
    let s0r_src = plain_degree0_range(&bracket_low.add(&lcorr_lam)?, torus)?.add(&g0r)?;
    let s0r = solve_part(&s0r_src, omega, dioph, &params, delta_n, &mut min_div)?;
    let s = s2.add(&s1)?.add(&s0r)?;

    // --- definitional residual of the degree <= 0 identity ------------------
    let ls = apply_lw(&s, omega);
    let lam_h_total = lam_unit_h.add(&lcorr_lam)?;
    let b_full = bracket_low.add(&poisson_bracket(&s0r, &gge1)?)?; // {S, G^{>=1}}
    let lam_c = to_centered(&lam_h_total, torus)?;
    let chk_sum = ls
        .scaled_re(-1.0)
        .add(&b_full)?
        .add(&lam_h_total)?
        .add(&gle0)?;
    let mut resid = plain_degree_part(&chk_sum, torus, DegreeSelector::AtMostZero)?;
    resid.add_scalar(-(carried_scalar + lam_c.scalar()));
    let homological_residual = resid.one_norm() + resid.scalar().norm();

    // --- cancellation-free reassembly of the perturbation -------------------
    let mut new_g =
        HamiltonianPoly::zero(ms.clone(), cap).with_prune_rel(state.g.prune_rel());
    new_g.add_scalar(carried_scalar);
    new_g = new_g.add(&gge1)?;
    new_g = new_g.add(&plain_degree_part(&b_full, torus, DegreeSelector::AtLeastOne)?)?;
    let d_bra = poisson_bracket(&s, &gle0)?; // {S, G^{<=0}}
    new_g = new_g.add(&d_bra)?;
    new_g.add_scalar(lam_c.scalar());
    new_g = new_g.add(&lam_c.project_degree(DegreeSelector::AtLeastOne)?.to_plain())?;
    // sum_{h>=2} ad^h G / h!  seeded with ad^1 G = {S, G}
    let x1 = b_full.add(&d_bra)?;
    new_g = new_g.add(&ad_tail(&s, &x1, 2, opts.order_cap.saturating_sub(1))?)?;
    // sum_{h>=1} ad^h(-L_omega S) / (h+1)!
    let y0 = ls.scaled_re(-1.0);
    new_g = new_g.add(&ad_tail(&s, &y0, 2, opts.order_cap)?)?;
    // sum_{h>=1} ad^h(U lam + L lam) / h!
    new_g = new_g.add(&ad_tail(&s, &lam_h_total, 1, opts.order_cap)?)?;
    new_g.prune();

    // --- bookkeeping updates -------------------------------------------------
    let new_correction = if s.is_zero() {
        state.correction.clone()
    } else {
        state.correction.updated(&s, torus, opts.order_cap)?
    };
    let correction_delta = new_correction.max_column_delta(&state.correction, &next_params);
    let new_lambda = state.lambda.sub(&lambda_bar);
    let (eps_after, theta_after) =
        KamState::diagnostics(&new_g, torus, &next_params, dioph.gamma)?;

    let generator_params = NormParams::new(params.r, params.p + delta_n)?;
    let report = StepReport {
        n,
        eps_before: state.eps,
        theta_before: state.theta,
        eps_after,
        theta_after,
        lambda_bar_norm: lambda_bar.sup_norm(),
        lambda_bar: lambda_bar.clone(),
        matrix_norm,
        min_divisor: min_div,
        generator_norm: s.weighted_norm(&generator_params),
        homological_residual,
        correction_delta,
        warnings: warnings.clone(),
    };
    let mut s_history = state.s_history.clone();
    s_history.push(s);
    let next = KamState {
        n: n + 1,
        g: new_g,
        lambda: new_lambda,
        correction: new_correction,
        s_history,
        eps: eps_after,
        theta: theta_after,
    };
    Ok((next, report))
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

/// One line of the convergence table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub r_n: f64,
    pub p_n: f64,
    pub eps_n: f64,
    pub theta_n: f64,
    /// `||lam_n||_inf` of the counterterm correction consumed by step `n`.
    pub lam_n: f64,
    /// Smallest divisor met by step `n` (infinite if nothing needed solving).
    pub min_div: f64,
}

/// Why the pipeline stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    /// `eps` fell below the floor.
    Converged,
    /// The configured number of steps ran without reaching the floor.
    StepLimit,
    /// `eps` failed to decrease at this step; the table still holds the full history.
    DecayViolation { at_step: usize },
}

/// Outcome of a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub status: RunStatus,
    /// One row per executed step (state before the step plus the step's outputs).
    pub table: Vec<ConvergenceRow>,
    pub final_state: KamState,
    /// `D(omega) + G_final`.
    pub normal_form: HamiltonianPoly,
    /// Assembled counterterm `sum_n lam_n`: adding its counterterm
    /// Hamiltonian to the input makes the run's conjugation exact.
    pub counterterm: CounterTerm,
    pub theta0: f64,
    /// Fitted `C` in `log eps_{n+1} <= chi log eps_n + C` (None without usable steps).
    pub decay_constant: Option<f64>,
    /// Fitted `A` in `eps_{n+1} <= A eps_n^2 (1+Theta_0)^5`.
    pub quadratic_constant: Option<f64>,
    /// Smallest observed `log eps_{n+1} / log eps_n` (superlinear decay gives > 1).
    pub min_log_exponent: Option<f64>,
    pub warnings: Vec<String>,
}

impl PipelineResult {
    /// The full `eps` history: one entry per table row plus the final state.
    pub fn eps_chain(&self) -> Vec<f64> {
        let mut chain: Vec<f64> = self.table.iter().map(|r| r.eps_n).collect();
        chain.push(self.final_state.eps);
        chain
    }
}

/// Runs up to `opts.steps` quadratic steps from the given perturbation.
pub fn run_kam(
    g0: HamiltonianPoly,
    omega: &FrequencyVector,
    torus: &TorusData,
    schedule: &KamSchedule,
    dioph: &DiophParams,
    opts: &RunOptions,
) -> Result<PipelineResult> {
    let ms = g0.mode_set().clone();
    let cap = g0.degree_cap();
    let mut state = KamState::initial(g0, torus, schedule, dioph)?;
    let theta0 = state.theta;
    let mut table = Vec::new();
    let mut warnings = Vec::new();
    let mut counterterm = CounterTerm::zero(ms);
    let mut status = RunStatus::StepLimit;
    for step in 0..opts.steps {
        if state.eps <= opts.floor {
            status = RunStatus::Converged;
            break;
        }
        let (next, report) = kam_step(&state, torus, omega, schedule, dioph, &opts.kam)?;
        table.push(ConvergenceRow {
            n: step,
            r_n: schedule.radius(step),
            p_n: schedule.smoothness(step),
            eps_n: report.eps_before,
            theta_n: report.theta_before,
            lam_n: report.lambda_bar_norm,
            min_div: report.min_divisor,
        });
        counterterm = counterterm.add(&report.lambda_bar);
        warnings.extend(report.warnings.iter().cloned());
        let grew = report.eps_after > report.eps_before && report.eps_before > opts.floor;
        state = next;
        if grew {
            status = RunStatus::DecayViolation { at_step: step };
            warnings.push(format!(
                "decay violation at step {step}: eps went from {:e} to {:e}",
                report.eps_before, report.eps_after
            ));
            break;
        }
    }
    if status == RunStatus::StepLimit && state.eps <= opts.floor {
        status = RunStatus::Converged;
    }

    // fitted decay statistics over the realized eps chain
    let mut chain: Vec<f64> = table.iter().map(|r| r.eps_n).collect();
    chain.push(state.eps);
    let mut decay_constant: Option<f64> = None;
    let mut quadratic_constant: Option<f64> = None;
    let mut min_log_exponent: Option<f64> = None;
    for w in chain.windows(2) {
        let (e0, e1) = (w[0], w[1]);
        if !(e0 > opts.floor) || !(e1 > 0.0) {
            continue;
        }
        let c = e1.ln() - CONTRACTION_EXPONENT * e0.ln();
        decay_constant = Some(decay_constant.map_or(c, |v: f64| v.max(c)));
        let a = e1 / (e0 * e0 * (1.0 + theta0).powi(5));
        quadratic_constant = Some(quadratic_constant.map_or(a, |v: f64| v.max(a)));
        if e0 < 1.0 {
            let ex = e1.ln() / e0.ln();
            min_log_exponent = Some(min_log_exponent.map_or(ex, |v: f64| v.min(ex)));
        }
    }

    let normal_form = diagonal_hamiltonian(omega, cap).add(&state.g)?;
    Ok(PipelineResult {
        status,
        table,
        final_state: state,
        normal_form,
        counterterm,
        theta0,
        decay_constant,
        quadratic_constant,
        min_log_exponent,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// frequency map
// ---------------------------------------------------------------------------

/// Solution of the frequency fixed point.
#[derive(Debug, Clone)]
pub struct FrequencySolution {
    /// Frequencies: the tangential entries are the prescribed `nu`, the
    /// normal ones solve `Omega_j + lambda_j(omega) = j^2 + W_j`.
    pub omega: FrequencyVector,
    /// Potential read off the relations: `V_j = nu_j + lambda_j - j^2` on the
    /// tangential sites, `W_j` on the normal ones.
    pub potential: ModeVector,
    /// Counterterm at the solution.
    pub counterterm: CounterTerm,
    pub iterations: usize,
    pub last_change: f64,
}

/// Solves `Omega_j = j^2 + W_j - lambda_j(nu, Omega)` on the normal sites by
/// direct fixed-point iteration, holding the tangential frequencies at `nu`.
pub fn solve_frequency_map<F>(
    mut lambda_map: F,
    nu: &ModeVector,
    w: &ModeVector,
    tol: f64,
    max_iters: usize,
) -> Result<FrequencySolution>
where
    F: FnMut(&FrequencyVector) -> Result<CounterTerm>,
{
    let ms = nu.mode_set().clone();
    let mut omega = FrequencyVector::from_fn(ms.clone(), |j| {
        if ms.is_tangential(j) {
            nu.get(j)
        } else {
            (j as f64) * (j as f64) + w.get(j)
        }
    })?;
    for it in 1..=max_iters {
        let lam = lambda_map(&omega)?;
        let next = FrequencyVector::from_fn(ms.clone(), |j| {
            if ms.is_tangential(j) {
                nu.get(j)
            } else {
                (j as f64) * (j as f64) + w.get(j) - lam.get(j)
            }
        })?;
        let change = omega.sup_distance(&next);
        omega = next;
        if change <= tol {
            let potential = ModeVector::from_fn(ms.clone(), |j| {
                if ms.is_tangential(j) {
                    nu.get(j) + lam.get(j) - (j as f64) * (j as f64)
                } else {
                    w.get(j)
                }
            });
            return Ok(FrequencySolution {
                omega,
                potential,
                counterterm: lam,
                iterations: it,
                last_change: change,
            });
        }
    }
    Err(Error::FrequencyMapDiverged(max_iters))
}

// ---------------------------------------------------------------------------
// torus residual and flows
// ---------------------------------------------------------------------------

/// Sup over sampled torus points and sites of the weighted vector field of
/// `N - D(omega)`: `sup_j |field_j| / w_j` with `w_j = r <<j>>^{-p}`.
///
/// Requires `N` to be in normal form up to `normal_form_tol` first; a normal
/// form leaves the torus invariant, so this measures how far the flow pushes
/// off it.
pub fn torus_residual(
    n: &HamiltonianPoly,
    omega: &FrequencyVector,
    torus: &TorusData,
    params: &NormParams,
    normal_form_tol: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let defect = normal_form_defect(n, omega, torus, params)?;
    if defect > normal_form_tol {
        return Err(Error::NotNormalForm {
            residual: defect,
            tol: normal_form_tol,
        });
    }
    let d = diagonal_hamiltonian(omega, n.degree_cap());
    let diff = n.sub(&d)?;
    let ms = torus.mode_set().clone();
    let tangential: Vec<Mode> = ms.tangential().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_samples.max(1) {
        let phases: Vec<(Mode, f64)> = tangential
            .iter()
            .map(|&j| (j, rng.gen::<f64>() * 2.0 * PI))
            .collect();
        let mut phase_vec = ModeVector::zero(ms.clone());
        for &(j, ph) in &phases {
            phase_vec.set(j, ph)?;
        }
        let u = torus.point(&phase_vec);
        let (_, field) = diff.evaluate_and_field(&u);
        for (j, fj) in field.iter() {
            worst = worst.max(fj.norm() / params.mode_weight(j));
        }
    }
    Ok(worst)
}

fn field_values(h: &HamiltonianPoly, u: &PhasePoint, sign: f64) -> Vec<Complex64> {
    let (_, field) = h.evaluate_and_field(u);
    field.values().iter().map(|v| v * sign).collect()
}

fn offset_point(u: &PhasePoint, k: &[Complex64], factor: f64) -> PhasePoint {
    let mut out = u.clone();
    for (v, dv) in out.values_mut().iter_mut().zip(k.iter()) {
        *v += dv * factor;
    }
    out
}

fn rk4_flow(h: &HamiltonianPoly, start: &PhasePoint, rk4_steps: usize, sign: f64) -> PhasePoint {
    let steps = rk4_steps.max(1);
    let dt = 1.0 / steps as f64;
    let mut u = start.clone();
    for _ in 0..steps {
        let k1 = field_values(h, &u, sign);
        let k2 = field_values(h, &offset_point(&u, &k1, dt / 2.0), sign);
        let k3 = field_values(h, &offset_point(&u, &k2, dt / 2.0), sign);
        let k4 = field_values(h, &offset_point(&u, &k3, dt), sign);
        for (idx, v) in u.values_mut().iter_mut().enumerate() {
            *v += (k1[idx] + 2.0 * k2[idx] + 2.0 * k3[idx] + k4[idx]) * (dt / 6.0);
        }
    }
    u
}

/// Time-one flow of the Hamiltonian vector field of `h` (RK4).
pub fn flow_time_one(h: &HamiltonianPoly, start: &PhasePoint, rk4_steps: usize) -> PhasePoint {
    rk4_flow(h, start, rk4_steps, 1.0)
}

/// Inverse of the time-one flow, i.e. the time-one flow of `-h` (RK4).
pub fn inverse_flow_time_one(
    h: &HamiltonianPoly,
    start: &PhasePoint,
    rk4_steps: usize,
) -> PhasePoint {
    rk4_flow(h, start, rk4_steps, -1.0)
}

/// Applies the normalizing map `Psi_n = Phi_{S_0}^{-1} o ... o Phi_{S_{n-1}}^{-1}`
/// to a point (with this bracket orientation, `e^{ad_S} H = H o Phi_S^{-1}`,
/// so the conjugation after `n` steps is `H_n = H_0 o Psi_n`).
pub fn apply_normalizing_map(
    s_history: &[HamiltonianPoly],
    start: &PhasePoint,
    rk4_steps: usize,
) -> PhasePoint {
    let mut u = start.clone();
    for s in s_history.iter().rev() {
        u = inverse_flow_time_one(s, &u, rk4_steps);
    }
    u
}

// ---------------------------------------------------------------------------
// trajectories
// ---------------------------------------------------------------------------

/// Samples the quasi-periodic profile `u(t, x) = sum_j sqrt(I_j)
/// e^{i(omega_j t + phi_j + j x)}` over the tangential sites, one row per
/// time, one column per spatial point.
pub fn sample_trajectory(
    torus: &TorusData,
    omega: &FrequencyVector,
    phases: &ModeVector,
    times: &[f64],
    x_grid: &[f64],
) -> Vec<Vec<Complex64>> {
    let waves: Vec<(f64, f64, f64, f64)> = torus
        .actions()
        .map(|(j, i)| (i.sqrt(), omega.get(j), phases.get(j), j as f64))
        .collect();
    times
        .iter()
        .map(|&t| {
            x_grid
                .iter()
                .map(|&x| {
                    waves
                        .iter()
                        .map(|&(a, w, ph, j)| a * Complex64::new(0.0, w * t + ph + j * x).exp())
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Fits the time-regularity exponent: least-squares slope of
/// `ln sup_x |u(t0 + h) - u(t0)|` against `ln h` over the given increments.
pub fn holder_time_exponent(
    torus: &TorusData,
    omega: &FrequencyVector,
    phases: &ModeVector,
    x_grid: &[f64],
    t0: f64,
    increments: &[f64],
) -> f64 {
    let mut times = vec![t0];
    times.extend(increments.iter().map(|&h| t0 + h));
    let rows = sample_trajectory(torus, omega, phases, &times, x_grid);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, &h) in increments.iter().enumerate() {
        let sup = rows[k + 1]
            .iter()
            .zip(rows[0].iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f64, f64::max);
        if sup > 0.0 && h > 0.0 {
            xs.push(h.ln());
            ys.push(sup.ln());
        }
    }
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{weight_base, MultiIndex};
    use crate::poly::{build_nls, random_real_hamiltonian, NonlinearityModel};
    use rand::Rng;

    fn ms() -> Arc<ModeSet> {
        Arc::new(ModeSet::default_truncation())
    }

    fn schedule() -> KamSchedule {
        KamSchedule::new(1e-3, 4e-4, 2.0, 1.0).expect("valid schedule")
    }

    /// Torus whose actions decay with the *final* weight exponent, so the
    /// whole schedule accepts it.
    fn torus_for(s: &KamSchedule) -> TorusData {
        let cap = s.max_torus_radius();
        let c = 0.5 * cap;
        let p_inf = s.smoothness_limit();
        TorusData::from_fn(
            ms(),
            |j| (c * weight_base(j).powf(-p_inf)).powi(2),
            cap,
            s.p0(),
        )
        .expect("valid torus")
    }

    fn dioph() -> DiophParams {
        DiophParams::new(1e-3, 2.0).expect("valid dioph params")
    }

    fn omega0() -> FrequencyVector {
        FrequencyVector::unperturbed(ms())
    }

    fn monomial(alpha: &[(Mode, u32)], beta: &[(Mode, u32)], c: Complex64) -> HamiltonianPoly {
        let mut h = HamiltonianPoly::zero(ms(), 6);
        h.insert_term(MultiIndex::from_pairs(alpha), MultiIndex::from_pairs(beta), c)
            .expect("admissible test monomial");
        h
    }

    // ---------------- schedule ----------------

    #[test]
    fn schedule_closed_forms_match_recursions() {
        let s = schedule();
        let mut r = s.r0();
        let mut p = s.p0();
        for n in 0..40 {
            assert!((s.radius(n) - r).abs() <= 1e-15 * s.r0());
            assert!((s.smoothness(n) - p).abs() <= 1e-12);
            r -= 3.0 * s.step_radius_margin(n);
            p += 3.0 * s.step_smoothing(n);
        }
    }

    #[test]
    fn schedule_budgets_sum_to_limits() {
        let s = schedule();
        // sum_n 3 rho_n = rho exactly (geometric series)
        let spent: f64 = (0..200).map(|n| 3.0 * s.step_radius_margin(n)).sum();
        assert!((spent - s.rho()).abs() <= 1e-15);
        assert!((s.radius_limit() - (s.r0() - s.rho())).abs() <= 1e-18);
        // sum_n 3 delta_n = 3 delta/2: delta/8 + sum 9 delta/(4 pi^2 n^2) = delta/2
        let gained: f64 = (0..200_000).map(|n| 3.0 * s.step_smoothing(n)).sum();
        assert!((s.smoothness_limit() - s.p0() - 1.5 * s.delta()).abs() <= 1e-15);
        // partial sum approaches the limit with the expected 1/N tail
        let tail = 27.0 * s.delta() / (4.0 * PI * PI) / 200_000.0;
        assert!((s.p0() + gained - s.smoothness_limit()).abs() <= 2.0 * tail);
    }

    #[test]
    fn schedule_rejects_oversized_margin() {
        match KamSchedule::new(1e-3, 6e-4, 2.0, 1.0) {
            Err(Error::ScheduleRadiusBudget { rho, r0 }) => {
                assert_eq!(rho, 6e-4);
                assert_eq!(r0, 1e-3);
            }
            other => panic!("expected radius-budget error, got {other:?}"),
        }
    }

    #[test]
    fn initial_state_rejects_fat_torus() {
        let s = schedule();
        let r = s.max_torus_radius() * 1.5;
        let torus = TorusData::from_fn(
            ms(),
            |j| (0.5 * r * weight_base(j).powf(-s.p0())).powi(2),
            r,
            s.p0(),
        )
        .unwrap();
        let g = HamiltonianPoly::zero(ms(), 6);
        match KamState::initial(g, &torus, &s, &dioph()) {
            Err(Error::TorusOutsideBall { .. }) => {}
            other => panic!("expected torus-ball error, got {other:?}"),
        }
    }

    // ---------------- Lie series ----------------

    #[test]
    fn lie_identity_generator_returns_input() {
        let h = monomial(&[(1, 1), (3, 1)], &[(2, 2)], Complex64::new(0.7, -0.2));
        let s = HamiltonianPoly::zero(ms(), 6);
        let out = lie_transform(&h, &s, 8).unwrap();
        assert_eq!(out.result.sub(&h).unwrap().one_norm(), 0.0);
        assert_eq!(out.tail_estimate, 0.0);
        assert_eq!(out.orders_used, 0);
    }

    #[test]
    fn lie_rotation_matches_hand_orders_and_limit() {
        // S = a |u_1|^2 rotates any monomial with one net u_1 leg: ad_S H = i a H.
        let a = 0.3;
        let c = Complex64::new(0.8, 0.1);
        let s = monomial(&[(1, 1)], &[(1, 1)], Complex64::new(a, 0.0));
        let h = monomial(&[(1, 1), (3, 1)], &[(2, 2)], c);
        let ad1 = poisson_bracket(&s, &h).unwrap();
        let got1 = ad1.coefficient_of(&[(1, 1), (3, 1)], &[(2, 2)]);
        assert!((got1 - Complex64::new(0.0, a) * c).norm() <= 1e-15);
        let ad2 = poisson_bracket(&s, &ad1).unwrap();
        let got2 = ad2.coefficient_of(&[(1, 1), (3, 1)], &[(2, 2)]);
        assert!((got2 + a * a * c).norm() <= 1e-15);
        let out = lie_transform(&h, &s, 12).unwrap();
        let got = out.result.coefficient_of(&[(1, 1), (3, 1)], &[(2, 2)]);
        let exact = c * Complex64::new(0.0, a).exp();
        assert!(
            (got - exact).norm() <= 1e-12,
            "rotation limit off: got {got}, exact {exact}"
        );
    }

    #[test]
    fn lie_rejects_constant_generator() {
        let h = monomial(&[(1, 1)], &[(1, 1)], Complex64::new(1.0, 0.0));
        let mut s = HamiltonianPoly::zero(ms(), 6);
        s.set_scalar(Complex64::new(0.5, 0.0));
        match lie_transform(&h, &s, 8) {
            Err(Error::InvalidInput(_)) => {}
            other => panic!("expected constant-generator rejection, got {other:?}"),
        }
    }

    #[test]
    fn lie_detects_nondecreasing_terms() {
        // a = 2.5 makes |ad^2 H|/2 = 3.125 |c| exceed |ad H| = 2.5 |c|.
        let s = monomial(&[(1, 1)], &[(1, 1)], Complex64::new(2.5, 0.0));
        let h = monomial(&[(1, 1), (3, 1)], &[(2, 2)], Complex64::new(1.0, 0.0));
        match lie_transform(&h, &s, 8) {
            Err(Error::LieSeriesDiverging { order, prev, next }) => {
                assert_eq!(order, 2);
                assert!(next > prev);
            }
            other => panic!("expected divergence report, got {other:?}"),
        }
    }

    #[test]
    fn lie_inverse_recovers_input_within_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_real_hamiltonian(&mut rng, &ms(), 6, 12);
        let s = random_real_hamiltonian(&mut rng, &ms(), 6, 6).scaled_re(1e-2);
        let fwd = lie_transform(&h, &s, 10).unwrap();
        let back = lie_transform(&fwd.result, &s.scaled_re(-1.0), 10).unwrap();
        let diff = back.result.sub(&h).unwrap().one_norm();
        let budget = 10.0 * (fwd.tail_estimate + back.tail_estimate) + 1e-12;
        assert!(
            diff <= budget,
            "inverse pair drifted: {diff:e} > budget {budget:e}"
        );
    }

    #[test]
    fn lie_matches_inverse_flow_evaluation() {
        // e^{ad_S} H evaluated at u equals H at the inverse time-one flow of S.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_real_hamiltonian(&mut rng, &ms(), 6, 10);
        let s = random_real_hamiltonian(&mut rng, &ms(), 6, 5).scaled_re(5e-3);
        let out = lie_transform(&h, &s, 12).unwrap();
        let u = PhasePoint::from_fn(ms(), |j| {
            if j.rem_euclid(3) == 0 {
                Complex64::new(0.03, -0.012)
            } else {
                Complex64::new(-0.006, 0.024)
            }
        });
        let (lhs, _) = out.result.evaluate_and_field(&u);
        let pulled = inverse_flow_time_one(&s, &u, 256);
        let (rhs, _) = h.evaluate_and_field(&pulled);
        assert!(
            (lhs - rhs).norm() <= 1e-9 * (1.0 + rhs.norm()),
            "lie vs flow mismatch: {lhs} vs {rhs}"
        );
    }

    // ---------------- counterterm system ----------------

    fn unit_ct(j: Mode, v: f64) -> CounterTerm {
        let mut c = CounterTerm::zero(ms());
        c.set(j, v).unwrap();
        c
    }

    #[test]
    fn counterterm_identity_matrix_returns_rhs() {
        let rhs = unit_ct(1, 0.25).add(&unit_ct(-3, -0.5));
        let sys = CounterTermSystem::new(ms(), Vec::new(), rhs.clone()).unwrap();
        let sol = solve_counterterm(&sys).unwrap();
        assert_eq!(sol.matrix_norm, 0.0);
        assert!(sol.warnings.is_empty());
        for (a, b) in sol.lambda.values().iter().zip(rhs.values()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn counterterm_hand_example_single_feedback() {
        // M maps e_1 -> 0.5 e_1: lambda_1 = rhs_1 / 1.5.
        let mset = ms();
        let mut cols: Vec<CounterTerm> =
            mset.modes().map(|_| CounterTerm::zero(mset.clone())).collect();
        let idx1 = mset.site_index(1).unwrap();
        cols[idx1] = unit_ct(1, 0.5);
        let sys = CounterTermSystem::new(mset, cols, unit_ct(1, 3.0)).unwrap();
        let sol = solve_counterterm(&sys).unwrap();
        assert!((sol.lambda.get(1) - 2.0).abs() <= 1e-15);
        assert!((sol.matrix_norm - 0.5).abs() <= 1e-15);
        assert!(sol.warnings.is_empty());
    }

    #[test]
    fn counterterm_hand_example_coupled_block() {
        // Block on sites 1, 2:  M = [[0, 0.2], [0.1, 0]] (columns e_1 -> 0.1 e_2, e_2 -> 0.2 e_1).
        // (I + M)^{-1} rhs with rhs = (1, 1): solve x + 0.2 y = 1, 0.1 x + y = 1
        // => x = 0.8/0.98, y = 0.9/0.98.
        let mset = ms();
        let mut cols: Vec<CounterTerm> =
            mset.modes().map(|_| CounterTerm::zero(mset.clone())).collect();
        cols[mset.site_index(1).unwrap()] = unit_ct(2, 0.1);
        cols[mset.site_index(2).unwrap()] = unit_ct(1, 0.2);
        let rhs = unit_ct(1, 1.0).add(&unit_ct(2, 1.0));
        let sys = CounterTermSystem::new(mset, cols, rhs).unwrap();
        let sol = solve_counterterm(&sys).unwrap();
        assert!((sol.lambda.get(1) - 0.8 / 0.98).abs() <= 1e-14);
        assert!((sol.lambda.get(2) - 0.9 / 0.98).abs() <= 1e-14);
    }

    #[test]
    fn counterterm_warns_above_half_and_rejects_above_one() {
        let mset = ms();
        let mut cols: Vec<CounterTerm> =
            mset.modes().map(|_| CounterTerm::zero(mset.clone())).collect();
        cols[mset.site_index(1).unwrap()] = unit_ct(1, 0.6);
        let sys = CounterTermSystem::new(mset.clone(), cols.clone(), unit_ct(1, 1.0)).unwrap();
        let sol = solve_counterterm(&sys).unwrap();
        assert_eq!(sol.warnings.len(), 1);
        assert!((sol.lambda.get(1) - 1.0 / 1.6).abs() <= 1e-15);

        cols[mset.site_index(1).unwrap()] = unit_ct(1, 1.0);
        let sys = CounterTermSystem::new(mset, cols, unit_ct(1, 1.0)).unwrap();
        match solve_counterterm(&sys) {
            Err(Error::CountertermNotContracting(norm)) => assert!((norm - 1.0).abs() <= 1e-15),
            other => panic!("expected contraction failure, got {other:?}"),
        }
    }

    #[test]
    fn counterterm_singular_system_is_reported() {
        // M = -Id makes Id + M singular.
        let mset = ms();
        let cols: Vec<CounterTerm> = mset
            .modes()
            .map(|j| unit_ct(j, -1.0))
            .collect();
        // ||M|| = 1 triggers the contraction check first, so test the solver
        // directly on a singular matrix.
        let sys = CounterTermSystem::new(mset, cols, unit_ct(1, 1.0)).unwrap();
        match solve_counterterm(&sys) {
            Err(Error::CountertermNotContracting(_)) => {}
            other => panic!("expected rejection, got {other:?}"),
        }
        let a = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        match solve_dense(a, vec![1.0, 2.0]) {
            Err(Error::CountertermSingular) => {}
            other => panic!("expected singular report, got {other:?}"),
        }
    }

    #[test]
    fn dense_solver_random_residual_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            let n = 8;
            let a: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    (0..n)
                        .map(|k| {
                            let v: f64 = rng.gen::<f64>() - 0.5;
                            if i == k {
                                v + 4.0
                            } else {
                                v
                            }
                        })
                        .collect()
                })
                .collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
            let x = solve_dense(a.clone(), b.clone()).unwrap();
            for i in 0..n {
                let lhs: f64 = (0..n).map(|k| a[i][k] * x[k]).sum();
                assert!((lhs - b[i]).abs() <= 1e-10);
            }
        }
    }

    // ---------------- single step ----------------

    #[test]
    fn kernel_perturbation_killed_by_counterterm_in_one_step() {
        let s = schedule();
        let torus = torus_for(&s);
        // G = 3 (|v_1|^2 - I_1): plain form 3|u_1|^2 - 3 I_1.
        let mut g = monomial(&[(1, 1)], &[(1, 1)], Complex64::new(3.0, 0.0));
        g.add_scalar(Complex64::new(-3.0 * torus.action(1), 0.0));
        let state = KamState::initial(g, &torus, &s, &dioph()).unwrap();
        assert!(state.eps > 0.0);
        let (next, report) = kam_step(&state, &torus, &omega0(), &s, &dioph(), &KamOptions::default()).unwrap();
        assert_eq!(report.lambda_bar.get(1), -3.0);
        assert_eq!(report.lambda_bar_norm, 3.0);
        assert_eq!(report.matrix_norm, 0.0);
        assert!(report.min_divisor.is_infinite(), "no divisor should be needed");
        assert!(next.s_history.last().unwrap().is_zero());
        assert!(report.homological_residual <= 1e-12);
        assert!(next.eps <= 1e-15, "kernel should be absorbed, eps = {:e}", next.eps);
        // ledger: Lambda_{n+1} = Lambda_n - lam_n = 0 - (-3) = 3.
        assert_eq!(next.lambda.get(1), 3.0);
    }

    #[test]
    fn normal_form_shape_is_a_fixed_point() {
        let s = schedule();
        let torus = torus_for(&s);
        // kernel of degree 2: 0.3 (|v_1|^2 - I_1)^2, plus a degree-2 range term.
        let i1 = torus.action(1);
        let mut g = monomial(&[(1, 2)], &[(1, 2)], Complex64::new(0.3, 0.0));
        g.insert_term(
            MultiIndex::from_pairs(&[(1, 1)]),
            MultiIndex::from_pairs(&[(1, 1)]),
            Complex64::new(-0.6 * i1, 0.0),
        )
        .unwrap();
        g.add_scalar(Complex64::new(0.3 * i1 * i1, 0.0));
        // range term with all legs on non-tangential modes, so it sits
        // strictly above degree zero and the step must leave it alone
        g.insert_term(
            MultiIndex::from_pairs(&[(3, 1), (5, 1)]),
            MultiIndex::from_pairs(&[(-3, 1), (11, 1)]),
            Complex64::new(0.2, 0.0),
        )
        .unwrap();
        g.insert_term(
            MultiIndex::from_pairs(&[(-3, 1), (11, 1)]),
            MultiIndex::from_pairs(&[(3, 1), (5, 1)]),
            Complex64::new(0.2, 0.0),
        )
        .unwrap();
        let state = KamState::initial(g.clone(), &torus, &s, &dioph()).unwrap();
        let (next, report) = kam_step(&state, &torus, &omega0(), &s, &dioph(), &KamOptions::default()).unwrap();
        assert!(next.s_history.last().unwrap().is_zero());
        assert_eq!(report.lambda_bar_norm, 0.0);
        let drift = next.g.sub(&g).unwrap();
        assert!(
            drift.one_norm() + drift.scalar().norm() <= 1e-13,
            "fixed point drifted by {:e}",
            drift.one_norm() + drift.scalar().norm()
        );
        assert!(next.correction.is_zero());
    }

    #[test]
    fn range_monomial_step_contracts_quadratically() {
        let s = schedule();
        let torus = torus_for(&s);
        let run_once = |eps_coeff: f64| -> (f64, f64, KamState) {
            let mut g = monomial(&[(1, 1), (3, 1)], &[(2, 2)], Complex64::new(eps_coeff, 0.0));
            g.insert_term(
                MultiIndex::from_pairs(&[(2, 2)]),
                MultiIndex::from_pairs(&[(1, 1), (3, 1)]),
                Complex64::new(eps_coeff, 0.0),
            )
            .unwrap();
            let state = KamState::initial(g, &torus, &s, &dioph()).unwrap();
            let (next, report) =
                kam_step(&state, &torus, &omega0(), &s, &dioph(), &KamOptions::default()).unwrap();
            // generator divides by i * (omega_1 + omega_3 - 2 omega_2) = 2i.
            let coeff = next
                .s_history
                .last()
                .unwrap()
                .coefficient_of(&[(1, 1), (3, 1)], &[(2, 2)]);
            assert!(
                (coeff - Complex64::new(0.0, -eps_coeff / 2.0)).norm() <= 1e-15 * eps_coeff.abs(),
                "generator coefficient {coeff} should be -i eps/2"
            );
            assert_eq!(report.lambda_bar_norm, 0.0);
            assert!((report.min_divisor - 2.0).abs() <= 1e-12);
            assert!(report.homological_residual <= 1e-12);
            (state.eps, next.eps, next)
        };
        let (e0_big, e1_big, _) = run_once(1e-5);
        let (e0_small, e1_small, _) = run_once(1e-6);
        assert!(e1_big < e0_big * 1e-2, "step should contract strongly");
        // quadratic signature: shrinking the input 10x shrinks the output ~100x.
        assert!(
            e1_small <= e1_big / 50.0,
            "expected quadratic scaling, got {e1_big:e} -> {e1_small:e}"
        );
        assert!((e0_big / e0_small - 10.0).abs() <= 1e-6 * 10.0);
    }

    #[test]
    fn dual_route_reassembly_matches_direct_conjugation() {
        let s = schedule();
        let torus = torus_for(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let g = random_real_hamiltonian(&mut rng, &ms(), 6, 20).scaled_re(1e-3);
        let state = KamState::initial(g.clone(), &torus, &s, &dioph()).unwrap();
        // a generic frequency keeps all random resonances uniformly away
        // from zero (the unperturbed j^2 has exact degree-6 resonances)
        let omega =
            FrequencyVector::from_fn(ms(), |j| {
                (j as f64) * (j as f64) + 0.45 * (1.3 * j as f64 + 0.7).sin()
            })
            .unwrap();
        let opts = KamOptions {
            order_cap: 12,
            ..KamOptions::default()
        };
        let (next, report) = kam_step(&state, &torus, &omega, &s, &dioph(), &opts).unwrap();
        let gen = next.s_history.last().unwrap();
        let d = diagonal_hamiltonian(&omega, 6);
        let lam_h = report.lambda_bar.to_hamiltonian(&torus, 6);
        let h_half = d.add(&g).unwrap().add(&lam_h).unwrap();
        let direct = lie_transform(&h_half, gen, 12).unwrap().result.sub(&d).unwrap();
        let diff = next.g.sub(&direct).unwrap();
        let err = diff.one_norm() + diff.scalar().norm();
        assert!(
            err <= 1e-9,
            "cancellation-free route and direct conjugation disagree by {err:e}"
        );
    }

    #[test]
    fn correction_columns_match_direct_conjugation() {
        let s = schedule();
        let torus = torus_for(&s);
        let mut g = monomial(&[(1, 1), (3, 1)], &[(2, 2)], Complex64::new(1e-4, 0.0));
        g.insert_term(
            MultiIndex::from_pairs(&[(2, 2)]),
            MultiIndex::from_pairs(&[(1, 1), (3, 1)]),
            Complex64::new(1e-4, 0.0),
        )
        .unwrap();
        let state = KamState::initial(g, &torus, &s, &dioph()).unwrap();
        let (next, _) =
            kam_step(&state, &torus, &omega0(), &s, &dioph(), &KamOptions::default()).unwrap();
        let gen = next.s_history.last().unwrap();
        assert!(!gen.is_zero());
        assert!(!next.correction.is_zero());
        for j in [1, 0, 16, -7] {
            let unit = CounterTerm::unit(ms(), j)
                .unwrap()
                .to_hamiltonian(&torus, 6);
            let direct = lie_transform(&unit, gen, 8).unwrap().result.sub(&unit).unwrap();
            let diff = next.correction.column(j).unwrap().sub(&direct).unwrap();
            assert!(
                diff.one_norm() + diff.scalar().norm() <= 1e-12,
                "column {j} mismatch: {:e}",
                diff.one_norm()
            );
        }
    }

    // ---------------- pipeline ----------------

    #[test]
    fn run_zero_perturbation_converges_immediately() {
        let s = schedule();
        let torus = torus_for(&s);
        let g = HamiltonianPoly::zero(ms(), 6);
        let omega = omega0();
        let result = run_kam(g, &omega, &torus, &s, &dioph(), &RunOptions::default()).unwrap();
        assert_eq!(result.status, RunStatus::Converged);
        assert!(result.table.is_empty());
        assert_eq!(result.final_state.eps, 0.0);
        let d = diagonal_hamiltonian(&omega, 6);
        assert_eq!(result.normal_form.sub(&d).unwrap().one_norm(), 0.0);
        assert_eq!(result.counterterm.sup_norm(), 0.0);
    }

    #[test]
    fn run_kernel_perturbation_finishes_in_one_step() {
        let s = schedule();
        let torus = torus_for(&s);
        let mut g = monomial(&[(1, 1)], &[(1, 1)], Complex64::new(3.0, 0.0));
        g.add_scalar(Complex64::new(-3.0 * torus.action(1), 0.0));
        let omega = omega0();
        let result = run_kam(g, &omega, &torus, &s, &dioph(), &RunOptions::default()).unwrap();
        assert_eq!(result.status, RunStatus::Converged);
        assert_eq!(result.table.len(), 1);
        assert_eq!(result.counterterm.get(1), -3.0);
        assert_eq!(result.table[0].lam_n, 3.0);
        assert!(result.table[0].min_div.is_infinite());
        let d = diagonal_hamiltonian(&omega, 6);
        assert!(result.normal_form.sub(&d).unwrap().one_norm() <= 1e-12);
    }

    #[test]
    fn run_quartic_nls_eps_decreases_superlinearly() {
        let s = schedule();
        let torus = torus_for(&s);
        let model = NonlinearityModel::new(vec![1.0], 1.0).unwrap();
        let v = ModeVector::zero(ms());
        let nls = build_nls(&v, &model, 4).unwrap();
        let omega = omega0();
        let d = diagonal_hamiltonian(&omega, 4);
        let g0 = nls.sub(&d).unwrap();
        let opts = RunOptions {
            steps: 2,
            ..RunOptions::default()
        };
        let result = run_kam(g0, &omega, &torus, &s, &dioph(), &opts).unwrap();
        assert!(
            !matches!(result.status, RunStatus::DecayViolation { .. }),
            "quartic run should not lose decay: {:?}",
            result.status
        );
        let chain = result.eps_chain();
        assert!(chain.len() >= 2);
        for w in chain.windows(2) {
            assert!(
                w[1] < w[0],
                "eps should decrease monotonically: {:?}",
                chain
            );
        }
        if let Some(ex) = result.min_log_exponent {
            assert!(ex > 1.0, "superlinear decay expected, exponent {ex}");
        }
    }

    // ---------------- frequency map ----------------

    #[test]
    fn frequency_map_zero_counterterm_is_immediate() {
        let mset = ms();
        let nu = ModeVector::from_fn(mset.clone(), |j| (j as f64) * (j as f64) + 0.1);
        let w = ModeVector::from_fn(mset.clone(), |j| 0.2 / (1.0 + j.abs() as f64));
        let sol = solve_frequency_map(
            |_omega| Ok(CounterTerm::zero(ms())),
            &nu,
            &w,
            1e-12,
            20,
        )
        .unwrap();
        assert_eq!(sol.iterations, 1);
        for j in mset.normal() {
            let expect = (*j as f64) * (*j as f64) + w.get(*j);
            assert_eq!(sol.omega.get(*j), expect);
            assert_eq!(sol.potential.get(*j), w.get(*j));
        }
        for j in mset.tangential() {
            assert_eq!(sol.omega.get(*j), nu.get(*j));
        }
    }

    #[test]
    fn frequency_map_constant_counterterm_settles_in_two_rounds() {
        let mset = ms();
        let c = 0.01;
        let nu = ModeVector::from_fn(mset.clone(), |j| (j as f64) * (j as f64) + 0.1);
        let w = ModeVector::zero(mset.clone());
        let sol = solve_frequency_map(
            |_omega| Ok(CounterTerm::from_fn(ms(), |_| c)),
            &nu,
            &w,
            1e-12,
            20,
        )
        .unwrap();
        assert_eq!(sol.iterations, 2);
        for j in mset.normal() {
            assert!((sol.omega.get(*j) - ((*j as f64) * (*j as f64) - c)).abs() <= 1e-15);
        }
        for j in mset.tangential() {
            // V_j = nu_j + lambda_j - j^2 = 0.1 + c, up to the cancellation
            // error of subtracting j^2 from an O(j^2) frequency
            assert!((sol.potential.get(*j) - (0.1 + c)).abs() <= 1e-12);
        }
    }

    #[test]
    fn frequency_map_reports_divergence() {
        let mset = ms();
        let nu = ModeVector::from_fn(mset.clone(), |j| (j as f64) * (j as f64) + 0.1);
        let w = ModeVector::zero(mset.clone());
        let mut flip = 0.3;
        let out = solve_frequency_map(
            move |_omega| {
                flip = -flip;
                Ok(CounterTerm::from_fn(ms(), |_| flip))
            },
            &nu,
            &w,
            1e-12,
            7,
        );
        match out {
            Err(Error::FrequencyMapDiverged(rounds)) => assert_eq!(rounds, 7),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    // ---------------- torus residual and trajectories ----------------

    #[test]
    fn torus_residual_vanishes_for_diagonal() {
        let s = schedule();
        let torus = torus_for(&s);
        let omega = omega0();
        let n = diagonal_hamiltonian(&omega, 6);
        let params = s.norm_params(0).unwrap();
        let res = torus_residual(&n, &omega, &torus, &params, 1e-12, 4, 9).unwrap();
        assert_eq!(res, 0.0);
    }

    #[test]
    fn torus_residual_of_centered_kernel_square_is_roundoff() {
        let s = schedule();
        let torus = torus_for(&s);
        let omega = omega0();
        let i1 = torus.action(1);
        let mut n = diagonal_hamiltonian(&omega, 6);
        n.insert_term(
            MultiIndex::from_pairs(&[(1, 2)]),
            MultiIndex::from_pairs(&[(1, 2)]),
            Complex64::new(1.0, 0.0),
        )
        .unwrap();
        n.insert_term(
            MultiIndex::from_pairs(&[(1, 1)]),
            MultiIndex::from_pairs(&[(1, 1)]),
            Complex64::new(-2.0 * i1, 0.0),
        )
        .unwrap();
        n.add_scalar(Complex64::new(i1 * i1, 0.0));
        let params = s.norm_params(0).unwrap();
        let res = torus_residual(&n, &omega, &torus, &params, 1e-12, 6, 3).unwrap();
        assert!(res <= 1e-10, "torus residual should be round-off, got {res:e}");
    }

    #[test]
    fn torus_residual_rejects_non_normal_form() {
        let s = schedule();
        let torus = torus_for(&s);
        let omega = omega0();
        let mut n = diagonal_hamiltonian(&omega, 6);
        n.insert_term(
            MultiIndex::from_pairs(&[(1, 1), (3, 1)]),
            MultiIndex::from_pairs(&[(2, 2)]),
            Complex64::new(1e-3, 0.0),
        )
        .unwrap();
        let params = s.norm_params(0).unwrap();
        match torus_residual(&n, &omega, &torus, &params, 1e-12, 4, 9) {
            Err(Error::NotNormalForm { residual, tol }) => {
                assert!(residual > tol);
            }
            other => panic!("expected normal-form rejection, got {other:?}"),
        }
    }

    #[test]
    fn trajectory_matches_hand_sum() {
        let s = schedule();
        let torus = torus_for(&s);
        let omega = omega0();
        let phases = ModeVector::from_fn(ms(), |j| 0.1 * j as f64);
        let rows = sample_trajectory(&torus, &omega, &phases, &[0.0, 0.7], &[0.0, 1.3]);
        for (ti, &t) in [0.0, 0.7].iter().enumerate() {
            for (xi, &x) in [0.0, 1.3].iter().enumerate() {
                let mut expect = Complex64::new(0.0, 0.0);
                for (j, i) in torus.actions() {
                    expect += i.sqrt()
                        * Complex64::new(0.0, omega.get(j) * t + 0.1 * j as f64 + j as f64 * x)
                            .exp();
                }
                assert!((rows[ti][xi] - expect).norm() <= 1e-15);
            }
        }
    }

    #[test]
    fn holder_exponent_increases_with_smoothness() {
        // Faster-decaying actions give a smoother time profile.
        let mset = ms();
        let omega = omega0();
        let phases = ModeVector::zero(mset.clone());
        let x_grid: Vec<f64> = (0..48).map(|k| k as f64 * PI / 24.0).collect();
        let hs: Vec<f64> = (0..8).map(|k| 1e-3 * 2f64.powi(k)).collect();
        let mk = |p: f64| {
            TorusData::from_fn(
                mset.clone(),
                |j| (5e-3 * weight_base(j).powf(-p)).powi(2),
                1e-2,
                p,
            )
            .unwrap()
        };
        let rough = holder_time_exponent(&mk(1.0), &omega, &phases, &x_grid, 0.0, &hs);
        let smooth = holder_time_exponent(&mk(3.0), &omega, &phases, &x_grid, 0.0, &hs);
        assert!(
            smooth > rough + 0.15,
            "smoothness trend violated: p=1 gives {rough}, p=3 gives {smooth}"
        );
    }
}
