//! Hamiltonian polynomials over the truncated mode set.
//!
//! A polynomial is a sparse map from admissible monomial pairs `u^alpha conj(u)^beta`
//! to complex coefficients, plus a scalar slot for the constant part. Constants are
//! kept out of the coefficient map so that norms never see them. Keys are stored in a
//! `BTreeMap`, which fixes a canonical lexicographic term order and makes every
//! floating-point accumulation in this module bit-reproducible.

use crate::error::{Error, Result};
use crate::index::{is_admissible_pair, weight_base, Mode, ModeSet, MultiIndex, SignedIndexVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

/// Coefficients below `DEFAULT_PRUNE_REL * max |coefficient|` are dropped after
/// nonlinear operations.
pub const DEFAULT_PRUNE_REL: f64 = 1e-14;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Monomial key `u^alpha conj(u)^beta`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TermKey {
    pub alpha: MultiIndex,
    pub beta: MultiIndex,
}

impl TermKey {
    pub fn new(alpha: MultiIndex, beta: MultiIndex) -> Self {
        Self { alpha, beta }
    }

    pub fn degree(&self) -> u32 {
        self.alpha.total() + self.beta.total()
    }

    /// The resonance vector `alpha - beta`.
    pub fn resonance(&self) -> SignedIndexVector {
        self.alpha.signed_difference(&self.beta)
    }

    pub fn transpose(&self) -> Self {
        Self {
            alpha: self.beta.clone(),
            beta: self.alpha.clone(),
        }
    }

    pub fn is_kernel(&self) -> bool {
        self.alpha == self.beta
    }
}

impl fmt::Display for TermKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}|{})", self.alpha, self.beta)
    }
}

/// Majorant-norm parameters: radius `r > 0` and Sobolev weight exponent `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub r: f64,
    pub p: f64,
}

impl NormParams {
    pub fn new(r: f64, p: f64) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() || !p.is_finite() {
            return Err(Error::BadNormParams { r, p });
        }
        Ok(Self { r, p })
    }

    /// Per-mode weight `r * max(2, |j|)^{-p}`.
    pub fn mode_weight(&self, j: Mode) -> f64 {
        self.r * weight_base(j).powf(-self.p)
    }
}

/// Taylor model of the nonlinearity `f(y) = sum_{d >= 1} f_d y^d` with a
/// majorant radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearityModel {
    taylor: Vec<f64>,
    radius: f64,
}

impl NonlinearityModel {
    /// `taylor[k]` is the coefficient of `y^{k+1}`.
    pub fn new(taylor: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::NonpositiveRadius(radius));
        }
        Ok(Self { taylor, radius })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Coefficient of `y^d` (zero beyond the stored expansion).
    pub fn taylor_coefficient(&self, d: usize) -> f64 {
        if d == 0 {
            0.0
        } else {
            self.taylor.get(d - 1).copied().unwrap_or(0.0)
        }
    }

    pub fn max_power(&self) -> usize {
        self.taylor.len()
    }

    /// Majorant `|f|_{R'} = sum_d |f_d| R'^d`; errors beyond the model radius.
    pub fn majorant(&self, r_prime: f64) -> Result<f64> {
        if !(r_prime >= 0.0) || r_prime > self.radius {
            return Err(Error::InvalidInput(format!(
                "majorant radius {r_prime} outside [0, {}]",
                self.radius
            )));
        }
        Ok(self
            .taylor
            .iter()
            .enumerate()
            .map(|(k, c)| c.abs() * r_prime.powi(k as i32 + 1))
            .sum())
    }
}

/// Real vector indexed by the modes of a `ModeSet` (potentials, counterterm data).
#[derive(Debug, Clone, PartialEq)]
pub struct ModeVector {
    mode_set: Arc<ModeSet>,
    values: Vec<f64>,
}

impl ModeVector {
    pub fn zero(mode_set: Arc<ModeSet>) -> Self {
        let n = mode_set.len();
        Self {
            mode_set,
            values: vec![0.0; n],
        }
    }

    pub fn from_fn(mode_set: Arc<ModeSet>, f: impl Fn(Mode) -> f64) -> Self {
        let values = mode_set.modes().map(f).collect();
        Self { mode_set, values }
    }

    pub fn mode_set(&self) -> &Arc<ModeSet> {
        &self.mode_set
    }

    pub fn get(&self, j: Mode) -> f64 {
        self.mode_set
            .site_index(j)
            .map(|i| self.values[i])
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
        self.values[i] = v;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (Mode, f64)> + '_ {
        self.mode_set.modes().zip(self.values.iter().copied())
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Frequency vector constrained to the box `|omega_j - j^2| < 1/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyVector {
    mode_set: Arc<ModeSet>,
    values: Vec<f64>,
}

impl FrequencyVector {
    pub fn from_fn(mode_set: Arc<ModeSet>, f: impl Fn(Mode) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(mode_set.len());
        for j in mode_set.modes() {
            let v = f(j);
            check_frequency_box(j, v)?;
            values.push(v);
        }
        Ok(Self { mode_set, values })
    }

    /// The unperturbed frequencies `omega_j = j^2`.
    pub fn unperturbed(mode_set: Arc<ModeSet>) -> Self {
        let values = mode_set.modes().map(|j| (j as f64) * (j as f64)).collect();
        Self { mode_set, values }
    }

    pub fn mode_set(&self) -> &Arc<ModeSet> {
        &self.mode_set
    }

    pub fn get(&self, j: Mode) -> f64 {
        let i = self.mode_set.site_index(j).expect("mode inside set");
        self.values[i]
    }

    pub fn set(&mut self, j: Mode, v: f64) -> Result<()> {
        check_frequency_box(j, v)?;
        let i = self
            .mode_set
            .site_index(j)
            .ok_or(Error::ModeOutsideSet {
                mode: j,
                m_max: self.mode_set.m_max(),
            })?;
        self.values[i] = v;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (Mode, f64)> + '_ {
        self.mode_set.modes().zip(self.values.iter().copied())
    }

    /// `omega . l` over the sparse support of `l`.
    pub fn dot(&self, l: &SignedIndexVector) -> f64 {
        l.iter().map(|(j, c)| self.get(j) * c as f64).sum()
    }

    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

fn check_frequency_box(j: Mode, v: f64) -> Result<()> {
    let j2 = (j as f64) * (j as f64);
    if !v.is_finite() || (v - j2).abs() >= 0.5 {
        return Err(Error::FrequencyOutsideBox { mode: j, value: v });
    }
    Ok(())
}

/// A point of the truncated phase space, indexed like the mode set.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    mode_set: Arc<ModeSet>,
    values: Vec<Complex64>,
}

impl PhasePoint {
    pub fn zero(mode_set: Arc<ModeSet>) -> Self {
        let n = mode_set.len();
        Self {
            mode_set,
            values: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn from_fn(mode_set: Arc<ModeSet>, f: impl Fn(Mode) -> Complex64) -> Self {
        let values = mode_set.modes().map(f).collect();
        Self { mode_set, values }
    }

    pub fn mode_set(&self) -> &Arc<ModeSet> {
        &self.mode_set
    }

    pub fn get(&self, j: Mode) -> Complex64 {
        self.mode_set
            .site_index(j)
            .map(|i| self.values[i])
            .unwrap_or_default()
    }

    pub fn set(&mut self, j: Mode, v: Complex64) -> Result<()> {
        let i = self
            .mode_set
            .site_index(j)
            .ok_or(Error::ModeOutsideSet {
                mode: j,
                m_max: self.mode_set.m_max(),
            })?;
        self.values[i] = v;
        Ok(())
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (Mode, Complex64)> + '_ {
        self.mode_set.modes().zip(self.values.iter().copied())
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.norm()))
    }
}

/// Serialized form of one monomial: exponent lists plus the complex coefficient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermRecord {
    pub alpha: Vec<(Mode, u32)>,
    pub beta: Vec<(Mode, u32)>,
    pub re: f64,
    pub im: f64,
}

/// Sparse Hamiltonian polynomial with a separate scalar slot.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianPoly {
    terms: BTreeMap<TermKey, Complex64>,
    scalar: Complex64,
    mode_set: Arc<ModeSet>,
    degree_cap: u32,
    prune_rel: f64,
    pruned_mass: f64,
    cap_discard_mass: f64,
}

impl HamiltonianPoly {
    pub fn zero(mode_set: Arc<ModeSet>, degree_cap: u32) -> Self {
        Self {
            terms: BTreeMap::new(),
            scalar: Complex64::default(),
            mode_set,
            degree_cap,
            prune_rel: DEFAULT_PRUNE_REL,
            pruned_mass: 0.0,
            cap_discard_mass: 0.0,
        }
    }

    pub fn with_prune_rel(mut self, prune_rel: f64) -> Self {
        self.prune_rel = prune_rel;
        self
    }

    pub fn mode_set(&self) -> &Arc<ModeSet> {
        &self.mode_set
    }

    pub fn degree_cap(&self) -> u32 {
        self.degree_cap
    }

    pub fn prune_rel(&self) -> f64 {
        self.prune_rel
    }

    /// Total |coefficient| mass dropped by pruning so far.
    pub fn pruned_mass(&self) -> f64 {
        self.pruned_mass
    }

    /// Total |coefficient| mass dropped by the degree cap so far.
    pub fn cap_discard_mass(&self) -> f64 {
        self.cap_discard_mass
    }

    pub fn scalar(&self) -> Complex64 {
        self.scalar
    }

    pub fn set_scalar(&mut self, c: Complex64) {
        self.scalar = c;
    }

    pub fn add_scalar(&mut self, c: Complex64) {
        self.scalar += c;
    }

    /// Adds `c * u^alpha conj(u)^beta`; empty indices accumulate into the scalar slot.
    pub fn insert_term(&mut self, alpha: MultiIndex, beta: MultiIndex, c: Complex64) -> Result<()> {
        for (j, _) in alpha.iter().chain(beta.iter()) {
            self.mode_set.check_mode(j)?;
        }
        if alpha.is_empty() && beta.is_empty() {
            self.scalar += c;
            return Ok(());
        }
        if !is_admissible_pair(&alpha, &beta) {
            return Err(Error::InvalidInput(format!(
                "monomial pair {} is not admissible (degree or momentum mismatch)",
                TermKey::new(alpha, beta)
            )));
        }
        let key = TermKey::new(alpha, beta);
        if key.degree() > self.degree_cap {
            self.cap_discard_mass += c.norm();
            return Ok(());
        }
        let slot = self.terms.entry(key).or_default();
        *slot += c;
        Ok(())
    }

    pub fn coefficient(&self, key: &TermKey) -> Complex64 {
        self.terms.get(key).copied().unwrap_or_default()
    }

    pub fn coefficient_of(&self, alpha: &[(Mode, u32)], beta: &[(Mode, u32)]) -> Complex64 {
        self.coefficient(&TermKey::new(
            MultiIndex::from_pairs(alpha),
            MultiIndex::from_pairs(beta),
        ))
    }

    /// Terms in canonical (lexicographic) key order.
    pub fn terms(&self) -> impl Iterator<Item = (&TermKey, Complex64)> + '_ {
        self.terms.iter().map(|(k, c)| (k, *c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty() && self.scalar == Complex64::default()
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.norm()))
    }

    pub fn one_norm(&self) -> f64 {
        self.terms.values().map(|c| c.norm()).sum()
    }

    pub fn max_degree(&self) -> u32 {
        self.terms.keys().map(|k| k.degree()).max().unwrap_or(0)
    }

    /// Drops coefficients below `prune_rel * max |coefficient|`.
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

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_mode_set(other)?;
        let mut out = self.clone();
        out.degree_cap = self.degree_cap.min(other.degree_cap);
        out.pruned_mass += other.pruned_mass;
        out.cap_discard_mass += other.cap_discard_mass;
        out.terms.retain(|k, c| {
            if k.degree() > out.degree_cap {
                out.cap_discard_mass += c.norm();
                false
            } else {
                true
            }
        });
        for (k, c) in other.terms() {
            if k.degree() > out.degree_cap {
                out.cap_discard_mass += c.norm();
                continue;
            }
            *out.terms.entry(k.clone()).or_default() += c;
        }
        out.scalar += other.scalar;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scaled(Complex64::new(-1.0, 0.0)))
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        let mut out = self.clone();
        for v in out.terms.values_mut() {
            *v *= c;
        }
        out.scalar *= c;
        out
    }

    pub fn scaled_re(&self, x: f64) -> Self {
        self.scaled(Complex64::new(x, 0.0))
    }

    /// Swaps `alpha` and `beta` and conjugates the coefficients.
    pub fn hermitian_transpose(&self) -> Self {
        let mut out = Self::zero(self.mode_set.clone(), self.degree_cap);
        out.prune_rel = self.prune_rel;
        for (k, c) in self.terms() {
            out.terms.insert(k.transpose(), c.conj());
        }
        out.scalar = self.scalar.conj();
        out
    }

    /// Checks `coefficient(alpha, beta) = conj(coefficient(beta, alpha))` up to `tol`.
    pub fn is_real_hamiltonian(&self, tol: f64) -> bool {
        if self.scalar.im.abs() > tol {
            return false;
        }
        self.terms().all(|(k, c)| {
            let mirror = self.coefficient(&k.transpose());
            (c - mirror.conj()).norm() <= tol
        })
    }

    /// Removes exact zeros left behind by cancellations.
    pub fn drop_zeros(&mut self) {
        self.terms.retain(|_, c| *c != Complex64::default());
    }

    pub fn check_same_mode_set(&self, other: &Self) -> Result<()> {
        if self.mode_set != other.mode_set {
            return Err(Error::InvalidInput(
                "operands live on different mode sets".into(),
            ));
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<TermRecord> {
        let mut out = Vec::with_capacity(self.terms.len() + 1);
        if self.scalar != Complex64::default() {
            out.push(TermRecord {
                alpha: Vec::new(),
                beta: Vec::new(),
                re: self.scalar.re,
                im: self.scalar.im,
            });
        }
        for (k, c) in self.terms() {
            out.push(TermRecord {
                alpha: k.alpha.iter().collect(),
                beta: k.beta.iter().collect(),
                re: c.re,
                im: c.im,
            });
        }
        out
    }

    pub fn from_records(
        mode_set: Arc<ModeSet>,
        degree_cap: u32,
        records: &[TermRecord],
    ) -> Result<Self> {
        let mut out = Self::zero(mode_set, degree_cap);
        for rec in records {
            out.insert_term(
                MultiIndex::from_pairs(&rec.alpha),
                MultiIndex::from_pairs(&rec.beta),
                Complex64::new(rec.re, rec.im),
            )?;
        }
        Ok(out)
    }

    /// Majorant norm `1/2 sup_j sum |c| (alpha_j + beta_j) w^{alpha+beta-2e_j}`.
    pub fn weighted_norm(&self, params: &NormParams) -> f64 {
        let ms = &self.mode_set;
        let weights: Vec<f64> = ms.modes().map(|j| params.mode_weight(j)).collect();
        let mut per_mode = vec![0.0f64; ms.len()];
        for (key, c) in self.terms() {
            let mag = c.norm();
            if mag == 0.0 {
                continue;
            }
            let combined = key.alpha.add(&key.beta);
            for (j, e) in combined.iter() {
                let i = ms.site_index(j).expect("mode inside set");
                // The weight exponent at the derivative site drops by 2; raise
                // each site to its final exponent directly so a net-zero
                // exponent contributes exactly 1 (an exact counterterm
                // isometry, and no spurious over/underflow from dividing).
                let mut w_pow = 1.0f64;
                for (k, ek) in combined.iter() {
                    let ik = ms.site_index(k).expect("mode inside set");
                    let exp = if k == j { ek as i32 - 2 } else { ek as i32 };
                    w_pow *= weights[ik].powi(exp);
                }
                per_mode[i] += mag * (e as f64) * w_pow;
            }
        }
        0.5 * per_mode.iter().fold(0.0f64, |m, v| m.max(*v))
    }

    /// Evaluates the polynomial and the vector field `-i dH/dconj(u_j)` at a point.
    pub fn evaluate_and_field(&self, u: &PhasePoint) -> (Complex64, PhasePoint) {
        let ms = &self.mode_set;
        let entries: Vec<(&TermKey, Complex64)> = self.terms().collect();
        let chunks: Vec<(Complex64, Vec<Complex64>)> = entries
            .par_chunks(4096)
            .map(|chunk| {
                let mut value = Complex64::default();
                let mut field = vec![Complex64::default(); ms.len()];
                for (key, c) in chunk {
                    let pa: Complex64 = key
                        .alpha
                        .iter()
                        .map(|(k, e)| u.get(k).powu(e))
                        .product();
                    let pb: Complex64 = key
                        .beta
                        .iter()
                        .map(|(k, e)| u.get(k).conj().powu(e))
                        .product();
                    value += c * pa * pb;
                    for (j, bj) in key.beta.iter() {
                        let mut prod = pa;
                        for (k, e) in key.beta.iter() {
                            let ee = if k == j { e - 1 } else { e };
                            prod *= u.get(k).conj().powu(ee);
                        }
                        let i = ms.site_index(j).expect("mode inside set");
                        field[i] += -I * c * (bj as f64) * prod;
                    }
                }
                (value, field)
            })
            .collect();
        let mut value = self.scalar;
        let mut field = PhasePoint::zero(ms.clone());
        for (v, f) in chunks {
            value += v;
            for (slot, x) in field.values_mut().iter_mut().zip(f) {
                *slot += x;
            }
        }
        (value, field)
    }
}

/// The diagonal quadratic `sum_j omega_j |u_j|^2`.
pub fn diagonal_hamiltonian(omega: &FrequencyVector, degree_cap: u32) -> HamiltonianPoly {
    let mut h = HamiltonianPoly::zero(omega.mode_set().clone(), degree_cap);
    for (j, w) in omega.iter() {
        let e = MultiIndex::unit(j);
        h.insert_term(e.clone(), e, Complex64::new(w, 0.0))
            .expect("diagonal terms are admissible");
    }
    h
}

/// Builds the truncated NLS Hamiltonian
/// `sum_j (j^2 + V_j) |u_j|^2 + sum_d (f_d/(d+1)) sum multinomial pairs`.
///
/// Taylor powers whose monomial degree `2(d+1)` exceeds the cap are dropped.
pub fn build_nls(
    v: &ModeVector,
    model: &NonlinearityModel,
    degree_cap: u32,
) -> Result<HamiltonianPoly> {
    if degree_cap % 2 != 0 {
        return Err(Error::OddDegreeCap(degree_cap));
    }
    if degree_cap < 2 {
        return Err(Error::InvalidInput(
            "degree cap below 2 cannot hold the quadratic part".into(),
        ));
    }
    let ms = v.mode_set().clone();
    for (j, vj) in v.iter() {
        if !vj.is_finite() || vj.abs() > 0.5 {
            return Err(Error::PotentialOutsideBox { mode: j, value: vj });
        }
    }
    let mut h = HamiltonianPoly::zero(ms.clone(), degree_cap);
    for j in ms.modes() {
        let c = (j as f64) * (j as f64) + v.get(j);
        let e = MultiIndex::unit(j);
        h.insert_term(e.clone(), e, Complex64::new(c, 0.0))?;
    }

    let modes: Vec<Mode> = ms.modes().collect();
    let max_d = (degree_cap / 2).saturating_sub(1) as usize;
    for d in 1..=max_d.min(model.max_power()) {
        let fd = model.taylor_coefficient(d);
        if fd == 0.0 {
            continue;
        }
        let size = d + 1;
        let base = fd / (size as f64);
        let size_factorial: f64 = (1..=size).map(|k| k as f64).product();
        let multisets = enumerate_multisets(&modes, size);
        let mut by_momentum: HashMap<i64, Vec<&MultiIndex>> = HashMap::new();
        for m in &multisets {
            by_momentum.entry(m.momentum()).or_default().push(m);
        }
        let mut groups: Vec<(i64, Vec<&MultiIndex>)> = by_momentum.into_iter().collect();
        groups.sort_by_key(|(p, _)| *p);
        for (_, group) in groups {
            for alpha in &group {
                let ma = size_factorial / alpha.factorial();
                for beta in &group {
                    let mb = size_factorial / beta.factorial();
                    let coeff = base * ma * mb;
                    h.insert_term((*alpha).clone(), (*beta).clone(), Complex64::new(coeff, 0.0))?;
                }
            }
        }
    }
    Ok(h)
}

/// All multisets of the given size over `modes`, as multi-indices.
fn enumerate_multisets(modes: &[Mode], size: usize) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    let mut stack: Vec<(usize, Vec<(Mode, u32)>, usize)> = vec![(0, Vec::new(), size)];
    while let Some((start, prefix, remaining)) = stack.pop() {
        if remaining == 0 {
            out.push(MultiIndex::from_pairs(&prefix));
            continue;
        }
        if start >= modes.len() {
            continue;
        }
        // Take k >= 0 copies of modes[start]; descending k keeps the output order
        // stable for a LIFO stack.
        for k in 0..=remaining {
            let mut next = prefix.clone();
            if k > 0 {
                next.push((modes[start], k as u32));
            }
            stack.push((start + 1, next, remaining - k));
        }
    }
    out
}

/// Poisson bracket `{F, G} = i sum_j (dF/dconj(u_j) dG/du_j - dF/du_j dG/dconj(u_j))`,
/// so that `{ sum omega_j |u_j|^2, u^a conj(u)^b } = i (omega . (a - b)) u^a conj(u)^b`.
pub fn poisson_bracket(f: &HamiltonianPoly, g: &HamiltonianPoly) -> Result<HamiltonianPoly> {
    f.check_same_mode_set(g)?;
    let cap = f.degree_cap().min(g.degree_cap());
    let f_terms: Vec<(&TermKey, Complex64)> = f.terms().collect();
    let g_terms: Vec<(&TermKey, Complex64)> = g.terms().collect();

    let chunk_maps: Vec<(HashMap<TermKey, Complex64>, f64)> = f_terms
        .par_chunks(64)
        .map(|chunk| {
            let mut acc: HashMap<TermKey, Complex64> = HashMap::new();
            let mut discarded = 0.0f64;
            for (fk, fc) in chunk {
                let f_deg = fk.degree() as i64;
                for (gk, gc) in &g_terms {
                    let out_deg = f_deg + gk.degree() as i64 - 2;
                    if out_deg <= 0 {
                        continue;
                    }
                    let coeff = I * fc * gc;
                    let too_deep = out_deg > cap as i64;
                    for (j, af, bf) in iter_pair_support(fk) {
                        let ag = gk.alpha.exponent(j);
                        let bg = gk.beta.exponent(j);
                        if ag == 0 && bg == 0 {
                            continue;
                        }
                        let factor = (bf as i64) * (ag as i64) - (af as i64) * (bg as i64);
                        if factor == 0 {
                            continue;
                        }
                        let c = coeff * factor as f64;
                        if too_deep {
                            discarded += c.norm();
                            continue;
                        }
                        let alpha = fk
                            .alpha
                            .add(&gk.alpha)
                            .sub_unit(j)
                            .expect("nonzero factor implies j in the alpha product");
                        let beta = fk
                            .beta
                            .add(&gk.beta)
                            .sub_unit(j)
                            .expect("nonzero factor implies j in the beta product");
                        *acc.entry(TermKey::new(alpha, beta)).or_default() += c;
                    }
                }
            }
            (acc, discarded)
        })
        .collect();

    let mut merged: HashMap<TermKey, Complex64> = HashMap::new();
    let mut discarded = 0.0f64;
    for (map, d) in chunk_maps {
        discarded += d;
        for (k, c) in map {
            *merged.entry(k).or_default() += c;
        }
    }

    let mut out = HamiltonianPoly::zero(f.mode_set().clone(), cap);
    out.prune_rel = f.prune_rel().min(g.prune_rel());
    out.cap_discard_mass = discarded;
    let mut keys: Vec<(TermKey, Complex64)> = merged.into_iter().collect();
    keys.sort_by(|(a, _), (b, _)| a.cmp(b));
    for (k, c) in keys {
        if c != Complex64::default() {
            out.terms.insert(k, c);
        }
    }
    out.prune();
    Ok(out)
}

/// Merged support of a term as `(mode, alpha_j, beta_j)` rows.
fn iter_pair_support(key: &TermKey) -> Vec<(Mode, u32, u32)> {
    let mut rows: Vec<(Mode, u32, u32)> = Vec::with_capacity(key.alpha.support_len() + key.beta.support_len());
    for (j, e) in key.alpha.iter() {
        rows.push((j, e, key.beta.exponent(j)));
    }
    for (j, e) in key.beta.iter() {
        if key.alpha.exponent(j) == 0 {
            rows.push((j, 0, e));
        }
    }
    rows.sort_by_key(|(j, _, _)| *j);
    rows
}

/// Sup of majorant norms over the samples plus `gamma` times the worst finite
/// difference quotient; a finite-sample lower bound of the Lipschitz seminorm.
pub fn lipschitz_norm(
    samples: &[(FrequencyVector, HamiltonianPoly)],
    gamma: f64,
    params: &NormParams,
) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::TooFewFrequencySamples(samples.len()));
    }
    let mut sup = 0.0f64;
    for (_, h) in samples {
        sup = sup.max(h.weighted_norm(params));
    }
    let mut quot = 0.0f64;
    for i in 0..samples.len() {
        for k in (i + 1)..samples.len() {
            let dist = samples[i].0.sup_distance(&samples[k].0);
            let diff = samples[i].1.sub(&samples[k].1)?.weighted_norm(params);
            if dist > 0.0 {
                quot = quot.max(diff / dist);
            } else if diff > 0.0 {
                return Ok(f64::INFINITY);
            }
        }
    }
    Ok(sup + gamma * quot)
}

/// Draws a Hermitian-symmetric polynomial with `n_pairs` random admissible pairs.
pub fn random_real_hamiltonian<R: rand::Rng>(
    rng: &mut R,
    mode_set: &Arc<ModeSet>,
    degree_cap: u32,
    n_pairs: usize,
) -> HamiltonianPoly {
    let modes: Vec<Mode> = mode_set.modes().collect();
    let mut h = HamiltonianPoly::zero(mode_set.clone(), degree_cap);
    let max_half = (degree_cap / 2).max(1);
    let mut placed = 0usize;
    let mut attempts = 0usize;
    while placed < n_pairs && attempts < n_pairs * 200 {
        attempts += 1;
        let d = rng.gen_range(1..=max_half) as usize;
        let alpha = MultiIndex::from_pairs(
            &(0..d)
                .map(|_| (modes[rng.gen_range(0..modes.len())], 1u32))
                .collect::<Vec<_>>(),
        );
        let beta = match random_momentum_match(rng, &modes, mode_set, d, alpha.momentum()) {
            Some(b) => b,
            None => continue,
        };
        let c = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if alpha == beta {
            let re = Complex64::new(c.re, 0.0);
            h.insert_term(alpha, beta, re).expect("admissible by construction");
        } else {
            h.insert_term(alpha.clone(), beta.clone(), c)
                .expect("admissible by construction");
            h.insert_term(beta, alpha, c.conj())
                .expect("admissible by construction");
        }
        placed += 1;
    }
    h
}

fn random_momentum_match<R: rand::Rng>(
    rng: &mut R,
    modes: &[Mode],
    mode_set: &ModeSet,
    d: usize,
    target: i64,
) -> Option<MultiIndex> {
    for _ in 0..64 {
        let mut picks: Vec<(Mode, u32)> = (0..d.saturating_sub(1))
            .map(|_| (modes[rng.gen_range(0..modes.len())], 1u32))
            .collect();
        let partial: i64 = picks.iter().map(|(j, _)| *j as i64).sum();
        let last = target - partial;
        if last.abs() <= mode_set.m_max() as i64 {
            picks.push((last as Mode, 1));
            return Some(MultiIndex::from_pairs(&picks));
        }
    }
    None
}
