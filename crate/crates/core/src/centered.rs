//! Torus-centered representation and degree decomposition.
//!
//! Around a torus with actions `I_j` on the tangential sites, each plain monomial is
//! rewritten in the factors `(|v_j|^2 - I_j)^{delta_j} v^alpha conj(v)^beta z^a conj(z)^b`
//! after peeling the common tangential part into binomials of `I + (|v|^2 - I)`. The
//! degree of a centered key is `2|delta| + |a| + |b| - 2`, which turns the scaling
//! analysis into a pure key filter. Constants produced by centering go to the scalar
//! slot, never into the coefficient map.

use crate::error::{Error, Result};
use crate::index::{weight_base, Mode, ModeSet, MultiIndex};
use crate::poly::{FrequencyVector, HamiltonianPoly, ModeVector, NormParams, PhasePoint};
use num_complex::Complex64;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

/// Invariant-torus data: nonnegative actions on the tangential sites inside the
/// weighted ball `sup_j sqrt(I_j) max(2,|j|)^p <= r`.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusData {
    mode_set: Arc<ModeSet>,
    actions: Vec<f64>,
    r: f64,
    p: f64,
}

impl TorusData {
    pub fn new(mode_set: Arc<ModeSet>, actions: &[(Mode, f64)], r: f64, p: f64) -> Result<Self> {
        let params = NormParams::new(r, p)?;
        let mut stored = vec![0.0f64; mode_set.tangential().len()];
        for &(j, value) in actions {
            if !mode_set.is_tangential(j) {
                return Err(Error::InvalidInput(format!(
                    "action on non-tangential mode {j}"
                )));
            }
            if !(value >= 0.0) || !value.is_finite() {
                return Err(Error::NegativeAction {
                    mode: j,
                    value,
                });
            }
            let pos = mode_set
                .tangential()
                .iter()
                .position(|&t| t == j)
                .expect("tangential site");
            stored[pos] = value;
        }
        let torus = Self {
            mode_set,
            actions: stored,
            r: params.r,
            p: params.p,
        };
        let sup = torus.sup_weighted_root_action();
        if sup > torus.r {
            return Err(Error::TorusOutsideBall { sup, r: torus.r });
        }
        Ok(torus)
    }

    pub fn from_fn(
        mode_set: Arc<ModeSet>,
        f: impl Fn(Mode) -> f64,
        r: f64,
        p: f64,
    ) -> Result<Self> {
        let actions: Vec<(Mode, f64)> = mode_set.tangential().iter().map(|&j| (j, f(j))).collect();
        Self::new(mode_set, &actions, r, p)
    }

    pub fn mode_set(&self) -> &Arc<ModeSet> {
        &self.mode_set
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn norm_params(&self) -> NormParams {
        NormParams { r: self.r, p: self.p }
    }

    pub fn action(&self, j: Mode) -> f64 {
        self.mode_set
            .tangential()
            .iter()
            .position(|&t| t == j)
            .map(|i| self.actions[i])
            .unwrap_or(0.0)
    }

    pub fn actions(&self) -> impl Iterator<Item = (Mode, f64)> + '_ {
        self.mode_set
            .tangential()
            .iter()
            .copied()
            .zip(self.actions.iter().copied())
    }

    pub fn sup_weighted_root_action(&self) -> f64 {
        self.actions()
            .fold(0.0f64, |m, (j, i)| m.max(i.sqrt() * weight_base(j).powf(self.p)))
    }

    /// The torus point `u_j = sqrt(I_j) e^{i phi_j}` (zero on normal sites).
    pub fn point(&self, phases: &ModeVector) -> PhasePoint {
        PhasePoint::from_fn(self.mode_set.clone(), |j| {
            let i = self.action(j);
            if i > 0.0 {
                Complex64::from_polar(i.sqrt(), phases.get(j))
            } else {
                Complex64::default()
            }
        })
    }
}

/// Key of a centered monomial
/// `(|v|^2 - I)^delta v^alpha conj(v)^beta z^a conj(z)^b`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CenteredKey {
    pub delta: MultiIndex,
    pub alpha: MultiIndex,
    pub beta: MultiIndex,
    pub a: MultiIndex,
    pub b: MultiIndex,
}

impl CenteredKey {
    pub fn degree(&self) -> i64 {
        2 * self.delta.total() as i64 + self.a.total() as i64 + self.b.total() as i64 - 2
    }

    /// Underlying plain pair degree `|delta+alpha+a| + |delta+beta+b|`.
    pub fn plain_degree(&self) -> u32 {
        2 * self.delta.total()
            + self.alpha.total()
            + self.beta.total()
            + self.a.total()
            + self.b.total()
    }

    pub fn is_kernel(&self) -> bool {
        self.alpha.is_empty() && self.beta.is_empty() && self.a == self.b
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
            && self.alpha.is_empty()
            && self.beta.is_empty()
            && self.a.is_empty()
            && self.b.is_empty()
    }

    /// The plain resonance vector `(alpha + a) - (beta + b)`.
    pub fn resonance(&self) -> crate::index::SignedIndexVector {
        self.alpha.add(&self.a).signed_difference(&self.beta.add(&self.b))
    }
}

impl fmt::Display for CenteredKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(d{} v{}|{} z{}|{})",
            self.delta, self.alpha, self.beta, self.a, self.b
        )
    }
}

/// Degree selector for the centered projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegreeSelector {
    Exact(i64),
    AtMostZero,
    AtLeastOne,
    AtLeast(i64),
    AtMost(i64),
}

impl DegreeSelector {
    fn validate(&self) -> Result<()> {
        let floor_arg = match self {
            DegreeSelector::Exact(d) | DegreeSelector::AtMost(d) | DegreeSelector::AtLeast(d) => {
                Some(*d)
            }
            _ => None,
        };
        if let Some(d) = floor_arg {
            if d < -2 {
                return Err(Error::DegreeBelowFloor(d));
            }
        }
        Ok(())
    }

    pub fn matches(&self, degree: i64) -> bool {
        match self {
            DegreeSelector::Exact(d) => degree == *d,
            DegreeSelector::AtMostZero => degree <= 0,
            DegreeSelector::AtLeastOne => degree >= 1,
            DegreeSelector::AtLeast(d) => degree >= *d,
            DegreeSelector::AtMost(d) => degree <= *d,
        }
    }

    /// Whether the scalar slot (a degree -2 constant) passes the filter.
    fn keeps_scalar(&self) -> bool {
        self.matches(-2)
    }
}

/// Sparse polynomial in centered coordinates around a torus.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredPoly {
    terms: BTreeMap<CenteredKey, Complex64>,
    scalar: Complex64,
    torus: TorusData,
    degree_cap: u32,
    prune_rel: f64,
    pruned_mass: f64,
}

impl CenteredPoly {
    pub fn zero(torus: TorusData, degree_cap: u32) -> Self {
        Self {
            terms: BTreeMap::new(),
            scalar: Complex64::default(),
            torus,
            degree_cap,
            prune_rel: crate::poly::DEFAULT_PRUNE_REL,
            pruned_mass: 0.0,
        }
    }

    pub fn torus(&self) -> &TorusData {
        &self.torus
    }

    pub fn mode_set(&self) -> &Arc<ModeSet> {
        self.torus.mode_set()
    }

    pub fn degree_cap(&self) -> u32 {
        self.degree_cap
    }

    pub fn scalar(&self) -> Complex64 {
        self.scalar
    }

    pub fn set_scalar(&mut self, c: Complex64) {
        self.scalar = c;
    }

    pub fn pruned_mass(&self) -> f64 {
        self.pruned_mass
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty() && self.scalar == Complex64::default()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&CenteredKey, Complex64)> + '_ {
        self.terms.iter().map(|(k, c)| (k, *c))
    }

    pub fn coefficient(&self, key: &CenteredKey) -> Complex64 {
        self.terms.get(key).copied().unwrap_or_default()
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.norm()))
    }

    /// Validates supports and admissibility, then accumulates the coefficient.
    pub fn insert(&mut self, key: CenteredKey, c: Complex64) -> Result<()> {
        let ms = self.mode_set().clone();
        for (j, _) in key.delta.iter().chain(key.alpha.iter()).chain(key.beta.iter()) {
            if !ms.is_tangential(j) {
                return Err(Error::InvalidInput(format!(
                    "tangential factor of centered key {key} touches non-tangential mode {j}"
                )));
            }
        }
        for (j, _) in key.a.iter().chain(key.b.iter()) {
            ms.check_mode(j)?;
            if ms.is_tangential(j) {
                return Err(Error::InvalidInput(format!(
                    "normal factor of centered key {key} touches tangential mode {j}"
                )));
            }
        }
        for (j, e) in key.alpha.iter() {
            if e > 0 && key.beta.exponent(j) > 0 {
                return Err(Error::InvalidInput(format!(
                    "angular parts of centered key {key} overlap at mode {j}"
                )));
            }
        }
        let lhs = key.alpha.add(&key.a);
        let rhs = key.beta.add(&key.b);
        if lhs.total() != rhs.total() || lhs.momentum() != rhs.momentum() {
            return Err(Error::InvalidInput(format!(
                "centered key {key} does not come from an admissible plain pair"
            )));
        }
        if key.is_empty() {
            self.scalar += c;
            return Ok(());
        }
        if key.plain_degree() > self.degree_cap {
            return Ok(());
        }
        *self.terms.entry(key).or_default() += c;

        Ok(())
    }

    pub fn prune(&mut self) {
        let max = self.max_abs_coefficient();
        if max == 0.0 {
            return;
        }
        let cut = self.prune_rel * max;
        let mut dropped = 0.0;
        self.terms.retain(|_, c| {
            let keep = c.norm() >= cut;
            if !keep {
                dropped += c.norm();
            }
            keep
        });
        self.pruned_mass += dropped;
    }

    /// Keeps the keys whose degree passes the selector; the scalar slot counts as
    /// degree -2.
    pub fn project_degree(&self, selector: DegreeSelector) -> Result<Self> {
        selector.validate()?;
        let mut out = Self::zero(self.torus.clone(), self.degree_cap);
        out.prune_rel = self.prune_rel;
        for (k, c) in self.terms() {
            if selector.matches(k.degree()) {
                out.terms.insert(k.clone(), c);
            }
        }
        if selector.keeps_scalar() {
            out.scalar = self.scalar;
        }
        Ok(out)
    }

    /// Kernel part: keys with empty angular factors and `a = b`, plus the scalar.
    pub fn kernel_part(&self) -> Self {
        let mut out = Self::zero(self.torus.clone(), self.degree_cap);
        out.prune_rel = self.prune_rel;
        for (k, c) in self.terms() {
            if k.is_kernel() {
                out.terms.insert(k.clone(), c);
            }
        }
        out.scalar = self.scalar;
        out
    }

    /// Range part: everything the kernel filter drops.
    pub fn range_part(&self) -> Self {
        let mut out = Self::zero(self.torus.clone(), self.degree_cap);
        out.prune_rel = self.prune_rel;
        for (k, c) in self.terms() {
            if !k.is_kernel() {
                out.terms.insert(k.clone(), c);
            }
        }
        out
    }

    /// Expands the centered factors back into plain monomials.
    pub fn to_plain(&self) -> HamiltonianPoly {
        let ms = self.mode_set().clone();
        let mut out = HamiltonianPoly::zero(ms, self.degree_cap);
        out = out.with_prune_rel(self.prune_rel);
        out.add_scalar(self.scalar);
        for (key, c) in self.terms() {
            let deltas: Vec<(Mode, u32)> = key.delta.iter().collect();
            // (|v_j|^2 - I_j)^{delta_j} = sum_k C(delta_j, k) (-I_j)^{delta_j - k} |v_j|^{2k}
            let mut expansions: Vec<(MultiIndex, f64)> = vec![(MultiIndex::empty(), 1.0)];
            for (j, dj) in deltas {
                let i_j = self.torus.action(j);
                let mut next = Vec::with_capacity(expansions.len() * (dj as usize + 1));
                for (idx, w) in &expansions {
                    for k in 0..=dj {
                        let factor =
                            binomial(dj, k) * neg_pow(i_j, dj - k);
                        if factor == 0.0 {
                            continue;
                        }
                        let mut grown = idx.clone();
                        if k > 0 {
                            grown = grown.add(&MultiIndex::from_pairs(&[(j, k)]));
                        }
                        next.push((grown, w * factor));
                    }
                }
                expansions = next;
            }
            for (common, w) in expansions {
                let alpha = key.alpha.add(&common).add(&key.a);
                let beta = key.beta.add(&common).add(&key.b);
                out.insert_term(alpha, beta, c * w)
                    .expect("centered keys re-expand to admissible plain pairs");
            }
        }
        out.drop_zeros();
        out.prune();
        out
    }

    /// Weighted norm of the plain re-expansion (scalar excluded).
    pub fn weighted_norm(&self, params: &NormParams) -> f64 {
        self.to_plain().weighted_norm(params)
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k.min(n));
    let mut num = 1.0f64;
    let mut den = 1.0f64;
    for i in 0..k {
        num *= (n - i) as f64;
        den *= (i + 1) as f64;
    }
    num / den
}

/// `(-x)^e` with the 0^0 = 1 convention.
fn neg_pow(x: f64, e: u32) -> f64 {
    if e == 0 {
        1.0
    } else {
        (-x).powi(e as i32)
    }
}

/// Rewrites a plain polynomial in centered coordinates around the torus.
pub fn to_centered(h: &HamiltonianPoly, torus: &TorusData) -> Result<CenteredPoly> {
    if h.mode_set() != torus.mode_set() {
        return Err(Error::InvalidInput(
            "polynomial and torus live on different mode sets".into(),
        ));
    }
    let ms = h.mode_set().clone();
    let mut out = CenteredPoly::zero(torus.clone(), h.degree_cap());
    out.prune_rel = h.prune_rel();
    out.add_scalar_internal(h.scalar());
    for (key, c) in h.terms() {
        let (alpha_t, a) = key.alpha.split(&ms);
        let (beta_t, b) = key.beta.split(&ms);
        // Common tangential part m_j = min(alpha_j, beta_j); the remainder is angular.
        let mut common: Vec<(Mode, u32)> = Vec::new();
        for (j, e) in alpha_t.iter() {
            let other = beta_t.exponent(j);
            if other > 0 {
                common.push((j, e.min(other)));
            }
        }
        let m = MultiIndex::from_pairs(&common);
        let alpha_ang = subtract(&alpha_t, &m);
        let beta_ang = subtract(&beta_t, &m);

        // prod_j (I_j + x_j)^{m_j} = sum_{delta <= m} prod C(m_j, delta_j) I^{m - delta} x^delta.
        let mut expansions: Vec<(MultiIndex, f64)> = vec![(MultiIndex::empty(), 1.0)];
        for (j, mj) in m.iter() {
            let i_j = torus.action(j);
            let mut next = Vec::with_capacity(expansions.len() * (mj as usize + 1));
            for (delta, w) in &expansions {
                for dj in 0..=mj {
                    let factor = binomial(mj, dj) * pos_pow(i_j, mj - dj);
                    if factor == 0.0 {
                        continue;
                    }
                    let mut grown = delta.clone();
                    if dj > 0 {
                        grown = grown.add(&MultiIndex::from_pairs(&[(j, dj)]));
                    }
                    next.push((grown, w * factor));
                }
            }
            expansions = next;
        }
        for (delta, w) in expansions {
            let centered = CenteredKey {
                delta,
                alpha: alpha_ang.clone(),
                beta: beta_ang.clone(),
                a: a.clone(),
                b: b.clone(),
            };
            out.insert(centered, c * w)?;
        }
    }
    out.drop_zeros_internal();
    out.prune();
    Ok(out)
}

fn pos_pow(x: f64, e: u32) -> f64 {
    if e == 0 {
        1.0
    } else {
        x.powi(e as i32)
    }
}

fn subtract(a: &MultiIndex, m: &MultiIndex) -> MultiIndex {
    let pairs: Vec<(Mode, u32)> = a
        .iter()
        .map(|(j, e)| (j, e - m.exponent(j)))
        .filter(|(_, e)| *e > 0)
        .collect();
    MultiIndex::from_pairs(&pairs)
}

impl CenteredPoly {
    fn add_scalar_internal(&mut self, c: Complex64) {
        self.scalar += c;
    }

    fn drop_zeros_internal(&mut self) {
        self.terms.retain(|_, c| *c != Complex64::default());
    }
}

/// Plain-form kernel projection: keeps `alpha = beta` terms and the scalar.
pub fn plain_kernel_part(h: &HamiltonianPoly) -> HamiltonianPoly {
    let mut out = HamiltonianPoly::zero(h.mode_set().clone(), h.degree_cap());
    out.set_scalar(h.scalar());
    for (k, c) in h.terms() {
        if k.is_kernel() {
            out.insert_term(k.alpha.clone(), k.beta.clone(), c)
                .expect("kernel terms are admissible");
        }
    }
    out
}

/// Plain-form range projection: drops `alpha = beta` terms and the scalar.
pub fn plain_range_part(h: &HamiltonianPoly) -> HamiltonianPoly {
    let mut out = HamiltonianPoly::zero(h.mode_set().clone(), h.degree_cap());
    for (k, c) in h.terms() {
        if !k.is_kernel() {
            out.insert_term(k.alpha.clone(), k.beta.clone(), c)
                .expect("range terms are admissible");
        }
    }
    out
}

/// Real counterterm data `lambda_j` per mode, with Hamiltonian
/// `sum_S lambda_j (|v_j|^2 - I_j) + sum_{S^c} lambda_j |z_j|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterTerm {
    mode_set: Arc<ModeSet>,
    lambda: Vec<f64>,
}

impl CounterTerm {
    pub fn zero(mode_set: Arc<ModeSet>) -> Self {
        let n = mode_set.len();
        Self {
            mode_set,
            lambda: vec![0.0; n],
        }
    }

    pub fn from_fn(mode_set: Arc<ModeSet>, f: impl Fn(Mode) -> f64) -> Self {
        let lambda = mode_set.modes().map(f).collect();
        Self { mode_set, lambda }
    }

    pub fn unit(mode_set: Arc<ModeSet>, j: Mode) -> Result<Self> {
        mode_set.check_mode(j)?;
        let mut out = Self::zero(mode_set);
        out.set(j, 1.0)?;
        Ok(out)
    }

    pub fn mode_set(&self) -> &Arc<ModeSet> {
        &self.mode_set
    }

    pub fn get(&self, j: Mode) -> f64 {
        self.mode_set
            .site_index(j)
            .map(|i| self.lambda[i])
            .unwrap_or(0.0)
    }

    pub fn set(&mut self, j: Mode, v: f64) -> Result<()> {
        let i = self
            .mode_set
            .site_index(j)
            .ok_or(Error::ModeOutsideSet {
                mode: j,
                m_max: self.mode_set.m_max(),
            })?;
        self.lambda[i] = v;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (Mode, f64)> + '_ {
        self.mode_set.modes().zip(self.lambda.iter().copied())
    }

    pub fn values(&self) -> &[f64] {
        &self.lambda
    }

    /// The counterterm norm is exactly `sup_j |lambda_j|` in every (r, p).
    pub fn sup_norm(&self) -> f64 {
        self.lambda.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.lambda.iter().all(|v| *v == 0.0)
    }

    pub fn add(&self, other: &Self) -> Self {
        let lambda = self
            .lambda
            .iter()
            .zip(other.lambda.iter())
            .map(|(a, b)| a + b)
            .collect();
        Self {
            mode_set: self.mode_set.clone(),
            lambda,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let lambda = self
            .lambda
            .iter()
            .zip(other.lambda.iter())
            .map(|(a, b)| a - b)
            .collect();
        Self {
            mode_set: self.mode_set.clone(),
            lambda,
        }
    }

    pub fn scaled(&self, x: f64) -> Self {
        Self {
            mode_set: self.mode_set.clone(),
            lambda: self.lambda.iter().map(|v| v * x).collect(),
        }
    }

    /// Plain Hamiltonian `sum lambda_j |u_j|^2` with scalar `-sum_S lambda_j I_j`.
    pub fn to_hamiltonian(&self, torus: &TorusData, degree_cap: u32) -> HamiltonianPoly {
        let mut h = HamiltonianPoly::zero(self.mode_set.clone(), degree_cap);
        let mut constant = 0.0;
        for (j, l) in self.iter() {
            if l == 0.0 {
                continue;
            }
            let e = MultiIndex::unit(j);
            h.insert_term(e.clone(), e, Complex64::new(l, 0.0))
                .expect("diagonal terms are admissible");
            if self.mode_set.is_tangential(j) {
                constant -= l * torus.action(j);
            }
        }
        h.add_scalar(Complex64::new(constant, 0.0));
        h
    }
}

/// Extracts the counterterm component of the degree-0 kernel:
/// `lambda_j` from keys `delta = e_j` (tangential) and `a = b = e_j` (normal).
pub fn extract_counterterm(c: &CenteredPoly) -> CounterTerm {
    let mut out = CounterTerm::zero(c.mode_set().clone());
    for (key, coeff) in c.terms() {
        if key.degree() != 0 || !key.is_kernel() {
            continue;
        }
        if key.delta.total() == 1 && key.a.is_empty() && key.b.is_empty() {
            let (j, _) = key.delta.iter().next().expect("single entry");
            let prev = out.get(j);
            out.set(j, prev + coeff.re).expect("mode inside set");
        } else if key.delta.is_empty() && key.a.total() == 1 && key.a == key.b {
            let (j, _) = key.a.iter().next().expect("single entry");
            let prev = out.get(j);
            out.set(j, prev + coeff.re).expect("mode inside set");
        }
    }
    out
}

/// Weighted norm of the degree <= 0 part of `N - D(omega)` around the torus.
pub fn normal_form_defect(
    n: &HamiltonianPoly,
    omega: &FrequencyVector,
    torus: &TorusData,
    params: &NormParams,
) -> Result<f64> {
    let d = crate::poly::diagonal_hamiltonian(omega, n.degree_cap());
    let diff = n.sub(&d)?;
    let centered = to_centered(&diff, torus)?;
    let low = centered.project_degree(DegreeSelector::AtMostZero)?;
    Ok(low.to_plain().weighted_norm(params))
}

/// True iff the degree <= 0 defect of `N - D(omega)` stays within `tol`.
pub fn is_normal_form(
    n: &HamiltonianPoly,
    omega: &FrequencyVector,
    torus: &TorusData,
    tol: f64,
    params: &NormParams,
) -> Result<bool> {
    Ok(normal_form_defect(n, omega, torus, params)? <= tol)
}

/// Splits a plain polynomial by centered degree and returns the requested part
/// back in plain form.
pub fn plain_degree_part(
    h: &HamiltonianPoly,
    torus: &TorusData,
    selector: DegreeSelector,
) -> Result<HamiltonianPoly> {
    Ok(to_centered(h, torus)?.project_degree(selector)?.to_plain())
}
