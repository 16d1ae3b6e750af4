//! Diophantine weights, resonance enumeration, divisor-growth audits, and
//! measure estimates for the frequency box.
//!
//! The nondegeneracy condition bounds `|omega . l|` from below by a weight that
//! decays only through the tangential entries of `l`. Because mass and momentum
//! are conserved, every resonance vector splits into a tangential part plus at
//! most two signed normal unit vectors, which makes exhaustive enumeration
//! feasible and keeps the combinatorial bounds checkable.

use crate::error::{Error, Result};
use crate::index::{weight_base, Mode, ModeSet, MultiIndex, SignedIndexVector};
use crate::poly::FrequencyVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeSet;
use std::sync::Arc;

/// Convention for the angle bracket applied to `log2(site)` in the weights.
///
/// The default is `max(1, |x|)`, which keeps every factor nonzero including the
/// site `1` (whose dyadic index is 0). The square-root variant is available for
/// sensitivity runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AngleBracket {
    #[default]
    MaxOne,
    Smooth,
}

impl AngleBracket {
    pub fn value(&self, x: f64) -> f64 {
        match self {
            AngleBracket::MaxOne => x.abs().max(1.0),
            AngleBracket::Smooth => (1.0 + x * x).sqrt(),
        }
    }
}

/// Parameters of the nondegeneracy condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiophParams {
    pub gamma: f64,
    pub tau: f64,
    pub bracket: AngleBracket,
}

impl DiophParams {
    /// `gamma` must lie in (0, 1/2]; `tau >= 3/2` keeps the measure-series
    /// exponent `tau - 1/2 >= 1` summable.
    pub fn new(gamma: f64, tau: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 0.5) {
            return Err(Error::GammaOutsideRange(gamma));
        }
        if !(tau >= 1.5) {
            return Err(Error::TauTooSmall(tau));
        }
        Ok(Self {
            gamma,
            tau,
            bracket: AngleBracket::MaxOne,
        })
    }

    pub fn with_bracket(mut self, bracket: AngleBracket) -> Self {
        self.bracket = bracket;
        self
    }
}

/// Filter on the quadratic moment `d(l) = sum_j l_j j^2` relative to `|l|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuadMomentFilter {
    /// `|d(l)| < |l|`: the set that actually constrains the frequency box;
    /// larger quadratic moments make the divisor automatically large.
    #[default]
    StrictlyBelowOneNorm,
    /// `|d(l)| <= 2|l|`: the wider set entering the divisor-growth supremum.
    AtMostTwiceOneNorm,
    /// No filter: every mass/momentum-zero vector in the budget.
    All,
}

impl QuadMomentFilter {
    pub fn accepts(&self, quad_moment: i64, one_norm: i64) -> bool {
        let q = quad_moment.unsigned_abs();
        let n = one_norm.unsigned_abs();
        match self {
            QuadMomentFilter::StrictlyBelowOneNorm => q < n,
            QuadMomentFilter::AtMostTwiceOneNorm => q <= 2 * n,
            QuadMomentFilter::All => true,
        }
    }
}

/// Finite enumeration budget for resonance vectors: one-norm at most `l_max`,
/// at most `normal_cap <= 2` normal entries, mass and momentum zero.
#[derive(Debug, Clone)]
pub struct ResonanceBudget {
    mode_set: Arc<ModeSet>,
    l_max: u32,
    normal_cap: u32,
    filter: QuadMomentFilter,
}

impl ResonanceBudget {
    pub fn new(mode_set: Arc<ModeSet>, l_max: u32) -> Self {
        Self {
            mode_set,
            l_max,
            normal_cap: 2,
            filter: QuadMomentFilter::default(),
        }
    }

    pub fn with_filter(mut self, filter: QuadMomentFilter) -> Self {
        self.filter = filter;
        self
    }

    /// `normal_cap = 0` restricts to purely tangential vectors; values above 2
    /// are rejected because conservation laws cap the admissible normal part.
    pub fn with_normal_cap(mut self, cap: u32) -> Result<Self> {
        if cap > 2 {
            return Err(Error::InvalidInput(format!(
                "normal-entry cap {cap} exceeds the structural bound 2"
            )));
        }
        self.normal_cap = cap;
        Ok(self)
    }

    pub fn mode_set(&self) -> &Arc<ModeSet> {
        &self.mode_set
    }

    pub fn l_max(&self) -> u32 {
        self.l_max
    }

    pub fn normal_cap(&self) -> u32 {
        self.normal_cap
    }

    pub fn filter(&self) -> QuadMomentFilter {
        self.filter
    }
}

/// The weight `gamma * prod_{tangential j = 2^i} (1 + l_j^2 <i>^2)^{-tau}`.
/// Normal entries contribute no factor.
pub fn dioph_weight(
    l: &SignedIndexVector,
    mode_set: &ModeSet,
    params: &DiophParams,
) -> Result<f64> {
    Ok(params.gamma * unit_dioph_weight(l, mode_set, params)?)
}

/// The same weight normalized to `gamma = 1`.
pub fn unit_dioph_weight(
    l: &SignedIndexVector,
    mode_set: &ModeSet,
    params: &DiophParams,
) -> Result<f64> {
    if l.is_zero() {
        return Err(Error::ZeroResonanceVector);
    }
    let mut product = 1.0f64;
    for (j, c) in l.iter() {
        if let Some(h) = mode_set.tangential_exponent(j) {
            let bracket = params.bracket.value(h as f64);
            let base = 1.0 + (c * c) as f64 * bracket * bracket;
            product *= base.powf(params.tau);
        }
    }
    Ok(1.0 / product)
}

/// Exhaustively enumerates the admissible resonance vectors of the budget in
/// canonical (sorted) order.
///
/// Every vector is produced as a tangential part plus at most two signed normal
/// unit vectors solved from the mass and momentum constraints. During the scan
/// the structural facts are asserted: one-norms are even and at least 4,
/// quadratic moments are even, each decomposition is unique, and for a fixed
/// tangential part the number of completions is at most `36 (|k| + 2)`.
pub fn enumerate_resonant_indices(budget: &ResonanceBudget) -> Vec<SignedIndexVector> {
    let ms = budget.mode_set();
    let sites = ms.tangential();
    let mut out: BTreeSet<SignedIndexVector> = BTreeSet::new();

    let mut k = vec![0i64; sites.len()];
    enumerate_tangential(budget, sites, &mut k, 0, budget.l_max as i64, &mut out);
    out.into_iter().collect()
}

fn enumerate_tangential(
    budget: &ResonanceBudget,
    sites: &[Mode],
    k: &mut Vec<i64>,
    pos: usize,
    remaining: i64,
    out: &mut BTreeSet<SignedIndexVector>,
) {
    if pos == sites.len() {
        complete_tangential_part(budget, sites, k, out);
        return;
    }
    for v in -remaining..=remaining {
        k[pos] = v;
        enumerate_tangential(budget, sites, k, pos + 1, remaining - v.abs(), out);
    }
    k[pos] = 0;
}

/// Solves for the normal completions of a fixed tangential part and pushes the
/// admissible vectors.
fn complete_tangential_part(
    budget: &ResonanceBudget,
    sites: &[Mode],
    k: &[i64],
    out: &mut BTreeSet<SignedIndexVector>,
) {
    let ms = budget.mode_set();
    let l_max = budget.l_max as i64;
    let k_norm: i64 = k.iter().map(|v| v.abs()).sum();
    let mass: i64 = k.iter().sum();
    let momentum: i64 = k
        .iter()
        .zip(sites.iter())
        .map(|(v, &s)| v * s as i64)
        .sum();
    let tangential_pairs: Vec<(Mode, i64)> = sites
        .iter()
        .zip(k.iter())
        .filter(|(_, &v)| v != 0)
        .map(|(&s, &v)| (s, v))
        .collect();

    let mut completions = 0usize;
    let mut push = |normal: &[(Mode, i64)], out: &mut BTreeSet<SignedIndexVector>| {
        let mut pairs = tangential_pairs.clone();
        pairs.extend_from_slice(normal);
        let l = SignedIndexVector::from_pairs(&pairs);
        debug_assert_eq!(l.mass(), 0);
        debug_assert_eq!(l.momentum(), 0);
        let one_norm = l.one_norm();
        assert!(
            one_norm % 2 == 0 && one_norm >= 4,
            "conserved quantities force even one-norm >= 4, got {one_norm} for {l}"
        );
        let quad = l.quad_moment();
        assert!(
            quad % 2 == 0,
            "zero mass and momentum force an even quadratic moment, got {quad} for {l}"
        );
        completions += 1;
        if budget.filter().accepts(quad, one_norm) {
            let fresh = out.insert(l);
            assert!(fresh, "each resonance vector has a unique decomposition");
        }
    };

    // No normal entries: the tangential part must close on its own.
    if mass == 0 && momentum == 0 && k_norm > 0 && k_norm <= l_max {
        push(&[], out);
    }

    // One normal entry sigma e_j: sigma = -mass, j = -sigma * momentum.
    if budget.normal_cap() >= 1 && k_norm + 1 <= l_max && mass.abs() == 1 {
        let sigma = -mass;
        let j = -sigma * momentum;
        if let Ok(j) = Mode::try_from(j) {
            if ms.is_normal(j) {
                push(&[(j, sigma)], out);
            }
        }
    }

    // Two normal entries sigma1 e_{j1} + sigma2 e_{j2}.
    if budget.normal_cap() >= 2 && k_norm + 2 <= l_max {
        let m_max = ms.m_max() as i64;
        // Same sign: sigma (e_{j1} + e_{j2}) with j1 <= j2, j1 + j2 = -sigma * momentum.
        if mass.abs() == 2 {
            let sigma = -mass / 2;
            let target = -sigma * momentum;
            let lo = (-m_max).max(target - m_max);
            let hi = target.div_euclid(2);
            for j1 in lo..=hi {
                let j2 = target - j1;
                let (Ok(j1), Ok(j2)) = (Mode::try_from(j1), Mode::try_from(j2)) else {
                    continue;
                };
                if !ms.is_normal(j1) || !ms.is_normal(j2) {
                    continue;
                }
                if j1 == j2 {
                    push(&[(j1, 2 * sigma)], out);
                } else {
                    push(&[(j1, sigma), (j2, sigma)], out);
                }
            }
        }
        // Opposite signs: +e_{j1} - e_{j2} with j2 = j1 + momentum.
        if mass == 0 {
            for &j1 in ms.normal() {
                let j2 = j1 as i64 + momentum;
                let Ok(j2) = Mode::try_from(j2) else {
                    continue;
                };
                if j2 == j1 || !ms.is_normal(j2) {
                    continue;
                }
                push(&[(j1, 1), (j2, -1)], out);
            }
        }
    }

    assert!(
        completions <= 36 * (k_norm as usize + 2),
        "completion count {completions} exceeds 36(|k|+2) for |k| = {k_norm}"
    );
}

/// Outcome of checking the nondegeneracy condition over a budget.
#[derive(Debug, Clone)]
pub struct DcReport {
    pub ok: bool,
    /// Number of enumerated vectors (quadratic-moment filter disabled).
    pub total: usize,
    /// Vectors with `|d(l)| >= |l|`, automatically satisfied in the box.
    pub prefiltered: usize,
    pub min_margin: f64,
    pub min_ratio: f64,
    pub witness: Option<SignedIndexVector>,
    pub witness_value: f64,
    pub witness_weight: f64,
}

/// Checks `|omega . l| >= dioph_weight(l)` for every vector in the budget.
///
/// Vectors with `|d(l)| >= |l|` are counted but need no comparison: inside the
/// box `|omega_j - j^2| < 1/2` one has `|omega . l| >= |d| - |l|/2 >= |l|/2 >= 2`,
/// which already dominates every weight since `gamma <= 1/2`. The returned
/// witness attains the minimal margin `|omega . l| - weight`.
pub fn verify_dc(
    omega: &FrequencyVector,
    params: &DiophParams,
    budget: &ResonanceBudget,
) -> DcReport {
    let all = budget.clone().with_filter(QuadMomentFilter::All);
    let vectors = enumerate_resonant_indices(&all);
    let mut report = DcReport {
        ok: true,
        total: vectors.len(),
        prefiltered: 0,
        min_margin: f64::INFINITY,
        min_ratio: f64::INFINITY,
        witness: None,
        witness_value: f64::NAN,
        witness_weight: f64::NAN,
    };
    for l in vectors {
        let value = omega.dot(&l).abs();
        let weight =
            dioph_weight(&l, budget.mode_set(), params).expect("enumerated vectors are nonzero");
        let margin = value - weight;
        if l.quad_moment().unsigned_abs() >= l.one_norm().unsigned_abs() {
            report.prefiltered += 1;
            assert!(
                margin > 0.0,
                "large quadratic moment must dominate the weight inside the box: {l}"
            );
        }
        if margin < report.min_margin {
            report.min_margin = margin;
            report.min_ratio = value / weight;
            report.witness_value = value;
            report.witness_weight = weight;
            report.witness = Some(l);
        }
    }
    report.ok = report.min_margin >= 0.0;
    report
}

/// Witness of the divisor-growth supremum: the minimal monomial pair realizing
/// a resonance vector together with the distinguished site `q`.
#[derive(Debug, Clone)]
pub struct K0Witness {
    pub alpha: MultiIndex,
    pub beta: MultiIndex,
    pub q: Mode,
    pub value: f64,
}

/// Measured divisor-growth supremum at weight increment `delta`.
#[derive(Debug, Clone)]
pub struct K0Audit {
    pub delta: f64,
    pub gamma: f64,
    pub measured_sup: f64,
    pub count: usize,
    pub witness: Option<K0Witness>,
}

impl K0Audit {
    /// The supremum with the Diophantine threshold scaled out (`gamma = 1`).
    ///
    /// The raw supremum carries one factor of `gamma` in its numerator, so it
    /// shrinks linearly with the threshold while the divisor distribution does
    /// not; this normalized value is the gamma-invariant growth constant that
    /// shape fits should consume.
    pub fn sup_at_unit_gamma(&self) -> f64 {
        self.measured_sup / self.gamma
    }

    /// Re-evaluates the witness value from its own data.
    pub fn recompute(&self, omega: &FrequencyVector, mode_set: &ModeSet) -> Option<f64> {
        let w = self.witness.as_ref()?;
        let l = w.alpha.signed_difference(&w.beta);
        let divisor = omega.dot(&l).abs();
        let mut log_base = 2.0 * weight_base(w.q).ln();
        for (j, e) in w.alpha.iter().chain(w.beta.iter()) {
            log_base -= e as f64 * weight_base(j).ln();
        }
        let _ = mode_set;
        Some((self.delta * log_base).exp() * self.gamma / divisor)
    }
}

/// Evaluates the growth objective for one resonance vector: the minimal pair
/// `alpha = l^+, beta = l^-` with the best admissible site `q`.
///
/// Padding the minimal pair with common exponents only shrinks the objective
/// (every site weight is at least 2), so the per-vector optimum is attained
/// here; the conserved quantities force the base below 1, which is asserted.
pub fn k0_term(
    l: &SignedIndexVector,
    delta: f64,
    params: &DiophParams,
    omega: &FrequencyVector,
) -> Option<K0Witness> {
    let (alpha, beta) = l.decompose();
    let divisor = omega.dot(l).abs();
    if divisor == 0.0 {
        return None;
    }
    let q = l
        .iter()
        .map(|(j, _)| j)
        .max_by(|a, b| {
            weight_base(*a)
                .partial_cmp(&weight_base(*b))
                .expect("finite weights")
                .then(a.cmp(b))
        })?;
    let mut log_base = 2.0 * weight_base(q).ln();
    for (j, c) in l.iter() {
        log_base -= c.unsigned_abs() as f64 * weight_base(j).ln();
    }
    debug_assert!(
        log_base <= 1e-12,
        "conserved quantities force the weight ratio below 1, got exp({log_base}) at {l}"
    );
    let value = (delta * log_base).exp() * params.gamma / divisor;
    Some(K0Witness {
        alpha,
        beta,
        q,
        value,
    })
}

/// Brute-force maximum of the divisor-growth objective over the budget (with
/// the `|d(l)| <= 2|l|` constraint), for `delta` in (0, 1).
pub fn k0_supremum(
    delta: f64,
    params: &DiophParams,
    budget: &ResonanceBudget,
    omega: &FrequencyVector,
) -> Result<K0Audit> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidInput(format!(
            "weight increment delta = {delta} must lie in (0, 1)"
        )));
    }
    let wide = budget
        .clone()
        .with_filter(QuadMomentFilter::AtMostTwiceOneNorm);
    let vectors = enumerate_resonant_indices(&wide);
    let mut audit = K0Audit {
        delta,
        gamma: params.gamma,
        measured_sup: 0.0,
        count: vectors.len(),
        witness: None,
    };
    for l in &vectors {
        if let Some(w) = k0_term(l, delta, params, omega) {
            if w.value > audit.measured_sup {
                audit.measured_sup = w.value;
                audit.witness = Some(w);
            }
        }
    }
    Ok(audit)
}

/// Fits the smallest constant `c` with `log K0(delta) <= (c/delta) ln^2(1/delta)`
/// across measured points; points with `K0 <= 1` impose no constraint.
pub fn fit_k0_constant(points: &[(f64, f64)]) -> f64 {
    let mut c = 0.0f64;
    for &(delta, k0) in points {
        if !(delta > 0.0 && delta < 1.0) || k0 <= 1.0 {
            continue;
        }
        let shape = (1.0 / delta).ln().powi(2) / delta;
        c = c.max(k0.ln() / shape);
    }
    c
}

/// Map from a normal mode and the tangential frequency draw (in ascending site
/// order) to the normal frequency. The default ignores the draw.
pub type NormalFrequencyMap<'a> = &'a (dyn Fn(Mode, &[f64]) -> f64 + Sync);

/// Default normal frequencies `Omega_j = j^2`.
pub fn unperturbed_normal_map(j: Mode, _nu: &[f64]) -> f64 {
    (j as f64) * (j as f64)
}

/// One excluded-measure row at a fixed `gamma` threshold.
#[derive(Debug, Clone)]
pub struct MeasureRow {
    pub gamma: f64,
    pub excluded: u64,
    pub fraction: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Truncated sum of the per-vector weights at this gamma.
    pub analytic_truncated: f64,
    /// `72 gamma` times the truncated tangential tail series.
    pub analytic_tail_bound: f64,
}

/// Monte Carlo + analytic excluded-measure report over a gamma grid.
#[derive(Debug, Clone)]
pub struct MeasureReport {
    pub tau: f64,
    pub l_max: u32,
    pub n_samples: u64,
    pub resonance_count: usize,
    pub rows: Vec<MeasureRow>,
    /// `sum_l unit_weight(l)` over the enumerated set (gamma = 1).
    pub unit_weight_sum: f64,
    /// Truncated `sum_{0<|k|<=l_max} prod_i (1+k_i^2 <i>^2)^{-(tau-1/2)}`.
    pub tail_series: f64,
    pub worst_t: f64,
    pub worst_witness: Option<SignedIndexVector>,
}

const MEASURE_SHARD: u64 = 1024;
const WILSON_Z: f64 = 1.959963984540054;

fn wilson_interval(successes: u64, n: u64) -> (f64, f64) {
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = WILSON_Z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if successes == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// Samples tangential frequencies uniformly in the box and measures the
/// fraction excluded by the nondegeneracy condition at each gamma threshold.
///
/// One pass serves the whole grid: each sample's normalized minimal divisor
/// `t = min_l |omega . l| / unit_weight(l)` is compared against every gamma.
/// Sampling is sharded deterministically (fixed shard size, one RNG stream per
/// shard), so results are independent of the worker count.
pub fn measure_estimate(
    params: &DiophParams,
    budget: &ResonanceBudget,
    gamma_grid: &[f64],
    n_samples: u64,
    seed: u64,
    omega_map: NormalFrequencyMap<'_>,
) -> Result<MeasureReport> {
    if n_samples == 0 {
        return Err(Error::NoSamples);
    }
    for &g in gamma_grid {
        if !(g > 0.0 && g <= 0.5) {
            return Err(Error::GammaOutsideRange(g));
        }
    }
    let ms = budget.mode_set();
    let strict = budget
        .clone()
        .with_filter(QuadMomentFilter::StrictlyBelowOneNorm);
    let vectors = enumerate_resonant_indices(&strict);

    // Dense site layout for fast dot products.
    let modes: Vec<Mode> = ms.modes().collect();
    let site_of = |j: Mode| -> usize { ms.site_index(j).expect("enumerated modes are in range") };
    let tangential_sites: Vec<usize> = ms.tangential().iter().map(|&j| site_of(j)).collect();
    let normal_modes: Vec<(Mode, usize)> = ms.normal().iter().map(|&j| (j, site_of(j))).collect();
    let compiled: Vec<(Vec<(usize, f64)>, f64)> = vectors
        .iter()
        .map(|l| {
            let entries: Vec<(usize, f64)> =
                l.iter().map(|(j, c)| (site_of(j), c as f64)).collect();
            let uw = unit_dioph_weight(l, ms, params).expect("nonzero vectors");
            (entries, uw)
        })
        .collect();

    let shards = n_samples.div_ceil(MEASURE_SHARD);
    struct ShardOut {
        excluded: Vec<u64>,
        worst_t: f64,
        worst_idx: usize,
    }
    let shard_results: Vec<Result<ShardOut>> = (0..shards)
        .into_par_iter()
        .map(|shard| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(shard + 1);
            let lo = shard * MEASURE_SHARD;
            let hi = ((shard + 1) * MEASURE_SHARD).min(n_samples);
            let mut excluded = vec![0u64; gamma_grid.len()];
            let mut worst_t = f64::INFINITY;
            let mut worst_idx = usize::MAX;
            let mut omega = vec![0.0f64; modes.len()];
            let mut nu = vec![0.0f64; tangential_sites.len()];
            for _ in lo..hi {
                for (slot, &site) in nu.iter_mut().zip(tangential_sites.iter()) {
                    let j = modes[site];
                    let center = (j as f64) * (j as f64);
                    *slot = center + rng.gen_range(-0.5..0.5);
                    omega[site] = *slot;
                }
                for &(j, site) in &normal_modes {
                    let value = omega_map(j, &nu);
                    let center = (j as f64) * (j as f64);
                    if !((value - center).abs() < 0.5) {
                        return Err(Error::FrequencyOutsideBox {
                            mode: j,
                            value,
                        });
                    }
                    omega[site] = value;
                }
                let mut t = f64::INFINITY;
                let mut t_idx = usize::MAX;
                for (idx, (entries, uw)) in compiled.iter().enumerate() {
                    let dot: f64 = entries.iter().map(|&(s, c)| c * omega[s]).sum();
                    let ratio = dot.abs() / uw;
                    if ratio < t {
                        t = ratio;
                        t_idx = idx;
                    }
                }
                for (slot, &g) in excluded.iter_mut().zip(gamma_grid.iter()) {
                    if t < g {
                        *slot += 1;
                    }
                }
                if t < worst_t {
                    worst_t = t;
                    worst_idx = t_idx;
                }
            }
            Ok(ShardOut {
                excluded,
                worst_t,
                worst_idx,
            })
        })
        .collect();

    let mut excluded = vec![0u64; gamma_grid.len()];
    let mut worst_t = f64::INFINITY;
    let mut worst_idx = usize::MAX;
    for shard in shard_results {
        let shard = shard?;
        for (acc, v) in excluded.iter_mut().zip(shard.excluded.iter()) {
            *acc += v;
        }
        if shard.worst_t < worst_t {
            worst_t = shard.worst_t;
            worst_idx = shard.worst_idx;
        }
    }

    let unit_weight_sum: f64 = compiled.iter().map(|(_, uw)| uw).sum();
    let tail_series = truncated_tail_series(ms, budget.l_max(), params);

    let rows = gamma_grid
        .iter()
        .zip(excluded.iter())
        .map(|(&g, &x)| {
            let (lo, hi) = wilson_interval(x, n_samples);
            MeasureRow {
                gamma: g,
                excluded: x,
                fraction: x as f64 / n_samples as f64,
                ci_low: lo,
                ci_high: hi,
                analytic_truncated: g * unit_weight_sum,
                analytic_tail_bound: 72.0 * g * tail_series,
            }
        })
        .collect();

    Ok(MeasureReport {
        tau: params.tau,
        l_max: budget.l_max(),
        n_samples,
        resonance_count: vectors.len(),
        rows,
        unit_weight_sum,
        tail_series,
        worst_t,
        worst_witness: if worst_idx == usize::MAX {
            None
        } else {
            Some(vectors[worst_idx].clone())
        },
    })
}

/// Truncated tangential series `sum_{0 < |k| <= l_max} prod_i (1 + k_i^2 <i>^2)^{-(tau - 1/2)}`,
/// the combinatorial factor of the excluded-measure bound.
fn truncated_tail_series(mode_set: &ModeSet, l_max: u32, params: &DiophParams) -> f64 {
    let exponents: Vec<f64> = mode_set
        .tangential()
        .iter()
        .map(|&s| {
            let i = s.trailing_zeros() as f64;
            params.bracket.value(i)
        })
        .collect();
    let mut sum = 0.0f64;
    let mut k = vec![0i64; exponents.len()];
    fn rec(exps: &[f64], k: &mut Vec<i64>, pos: usize, remaining: i64, tau: f64, sum: &mut f64) {
        if pos == exps.len() {
            let norm: i64 = k.iter().map(|v| v.abs()).sum();
            if norm == 0 {
                return;
            }
            let mut prod = 1.0f64;
            for (v, b) in k.iter().zip(exps.iter()) {
                prod *= (1.0 + (v * v) as f64 * b * b).powf(tau - 0.5);
            }
            *sum += 1.0 / prod;
            return;
        }
        for v in -remaining..=remaining {
            k[pos] = v;
            rec(exps, k, pos + 1, remaining - v.abs(), tau, sum);
        }
        k[pos] = 0;
    }
    rec(
        &exponents,
        &mut k,
        0,
        l_max as i64,
        params.tau,
        &mut sum,
    );
    sum
}

/// Randomized validation report for the two auxiliary inequalities used by the
/// measure argument: the stacked-sum bound
/// `sum x_i / prod x_i^a <= x_1^{1-a} + 2/(a x_1^a)` (for `0<a<1`,
/// `x_1 >= ... >= x_N >= 2`) and the log-growth bound
/// `-delta y + log(1 + y^2) <= 0` for `y >= 4 log(1/delta) / delta`,
/// `0 < delta < e^{-3}`.
#[derive(Debug, Clone)]
pub struct AuxLemmaReport {
    pub trials: u64,
    pub stacked_sum_violations: u64,
    pub log_decay_violations: u64,
    /// Largest observed `lhs - rhs` for the stacked-sum bound (negative = margin).
    pub worst_stacked_margin: f64,
    /// Largest observed `-delta y + log(1+y^2)` on the tested domain.
    pub worst_log_margin: f64,
}

impl AuxLemmaReport {
    pub fn pass(&self) -> bool {
        self.stacked_sum_violations == 0 && self.log_decay_violations == 0
    }
}

pub fn aux_lemma_validators(trials: u64, seed: u64) -> AuxLemmaReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = AuxLemmaReport {
        trials,
        stacked_sum_violations: 0,
        log_decay_violations: 0,
        worst_stacked_margin: f64::NEG_INFINITY,
        worst_log_margin: f64::NEG_INFINITY,
    };
    for _ in 0..trials {
        // Stacked-sum inequality.
        let a: f64 = rng.gen_range(f64::EPSILON..1.0);
        let n: usize = rng.gen_range(1..=8);
        let mut xs: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.gen_range(0.0f64..1.0);
                2.0 - 3.0 * (1.0 - u).ln()
            })
            .collect();
        xs.sort_by(|p, q| q.partial_cmp(p).expect("finite samples"));
        let sum: f64 = xs.iter().sum();
        let prod_a: f64 = xs.iter().map(|x| x.powf(a)).product();
        let lhs = sum / prod_a;
        let rhs = xs[0].powf(1.0 - a) + 2.0 / (a * xs[0].powf(a));
        let margin = lhs - rhs;
        report.worst_stacked_margin = report.worst_stacked_margin.max(margin);
        if margin > 1e-12 * (lhs.abs() + rhs.abs()) {
            report.stacked_sum_violations += 1;
        }

        // Log-growth inequality.
        let delta = (-rng.gen_range(3.0f64..14.0)).exp();
        let y = 4.0 / delta * (1.0 / delta).ln() * (1.0 + rng.gen_range(0.0f64..10.0));
        let f = -delta * y + (1.0 + y * y).ln();
        report.worst_log_margin = report.worst_log_margin.max(f);
        if f > 1e-12 {
            report.log_decay_violations += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::ModeSet;

    fn ms() -> Arc<ModeSet> {
        Arc::new(ModeSet::default_truncation())
    }

    fn params() -> DiophParams {
        DiophParams::new(0.01, 2.0).unwrap()
    }

    fn sv(pairs: &[(Mode, i64)]) -> SignedIndexVector {
        SignedIndexVector::from_pairs(pairs)
    }

    #[test]
    fn params_are_validated() {
        assert!(matches!(
            DiophParams::new(0.0, 2.0),
            Err(Error::GammaOutsideRange(_))
        ));
        assert!(matches!(
            DiophParams::new(0.6, 2.0),
            Err(Error::GammaOutsideRange(_))
        ));
        assert!(matches!(
            DiophParams::new(0.01, 1.4),
            Err(Error::TauTooSmall(_))
        ));
        assert!(DiophParams::new(0.5, 1.5).is_ok());
    }

    #[test]
    fn weight_matches_hand_value() {
        let l = sv(&[(3, 1), (5, 1), (4, -2)]);
        let w = dioph_weight(&l, &ms(), &params()).unwrap();
        // Only the tangential site 4 = 2^2 contributes: (1 + 4*4)^2 = 289.
        assert!((w - 0.01 / 289.0).abs() < 1e-18);
    }

    #[test]
    fn weight_is_gamma_on_normal_support_and_errors_on_zero() {
        let l = sv(&[(3, 1), (5, -1)]);
        assert_eq!(dioph_weight(&l, &ms(), &params()).unwrap(), 0.01);
        let zero = SignedIndexVector::zero();
        assert!(matches!(
            dioph_weight(&zero, &ms(), &params()),
            Err(Error::ZeroResonanceVector)
        ));
    }

    #[test]
    fn weight_never_exceeds_gamma_with_equality_iff_normal_support() {
        let budget = ResonanceBudget::new(ms(), 6).with_filter(QuadMomentFilter::All);
        for l in enumerate_resonant_indices(&budget) {
            let w = dioph_weight(&l, &ms(), &params()).unwrap();
            assert!(w <= 0.01 + 1e-18);
            let has_tangential = l.iter().any(|(j, _)| ms().is_tangential(j));
            if has_tangential {
                assert!(w < 0.01);
            } else {
                assert_eq!(w, 0.01);
            }
        }
    }

    #[test]
    fn smooth_bracket_changes_the_weight_as_expected() {
        let l = sv(&[(3, 1), (5, 1), (4, -2)]);
        let p = params().with_bracket(AngleBracket::Smooth);
        // Site 4 has dyadic index 2: bracket^2 = 5, factor (1 + 4*5)^2 = 441.
        let w = dioph_weight(&l, &ms(), &p).unwrap();
        assert!((w - 0.01 / 441.0).abs() < 1e-18);
    }

    #[test]
    fn tiny_budgets_enumerate_to_empty() {
        let b2 = ResonanceBudget::new(ms(), 2);
        assert!(enumerate_resonant_indices(&b2).is_empty());
        let b4t = ResonanceBudget::new(ms(), 4).with_normal_cap(0).unwrap();
        assert!(enumerate_resonant_indices(&b4t).is_empty());
    }

    #[test]
    fn lmax_four_contains_the_basic_mixed_resonance() {
        let b = ResonanceBudget::new(ms(), 4);
        let found = enumerate_resonant_indices(&b);
        let target = sv(&[(3, 1), (5, 1), (4, -2)]);
        assert!(found.contains(&target), "missing {target}");
        for l in &found {
            assert!(l.one_norm() <= 4);
            let normal_norm: u64 = l
                .iter()
                .filter(|(j, _)| ms().is_normal(*j))
                .map(|(_, c)| c.unsigned_abs())
                .sum();
            assert!(normal_norm <= 2);
        }
    }

    #[test]
    fn enumeration_is_sorted_and_unique() {
        let b = ResonanceBudget::new(ms(), 8);
        let found = enumerate_resonant_indices(&b);
        assert!(!found.is_empty());
        for w in found.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn normal_cap_above_two_is_rejected() {
        assert!(ResonanceBudget::new(ms(), 4).with_normal_cap(3).is_err());
    }

    #[test]
    fn unperturbed_frequencies_pass_small_budgets() {
        let omega = FrequencyVector::unperturbed(ms());
        let budget = ResonanceBudget::new(ms(), 4);
        let report = verify_dc(&omega, &params(), &budget);
        assert!(report.ok, "min margin {}", report.min_margin);
        assert!(report.total > 0);
        assert!(report.prefiltered > 0);
        assert!(report.min_margin > 0.0);
        let l = sv(&[(3, 1), (5, 1), (4, -2)]);
        // Quadratic moment 9 + 25 - 32 = 2 is the exact divisor here.
        assert_eq!(omega.dot(&l), 2.0);
        let w = dioph_weight(&l, &ms(), &params()).unwrap();
        assert!(omega.dot(&l).abs() >= w);
    }

    #[test]
    fn unperturbed_frequencies_hit_exact_resonances_at_larger_budgets() {
        // At one-norm 6 the truncation admits vectors with vanishing quadratic
        // moment (e.g. -2e_1 + e_4 - e_8 + e_{-1} + e_7), so the divisor at the
        // integer frequencies is exactly zero and the condition honestly fails.
        let omega = FrequencyVector::unperturbed(ms());
        let budget = ResonanceBudget::new(ms(), 6);
        let report = verify_dc(&omega, &params(), &budget);
        assert!(!report.ok);
        assert_eq!(report.witness_value, 0.0);
        let w = report.witness.expect("failing vector is reported");
        assert_eq!(w.quad_moment(), 0);
        // Consistency of the reported minimum.
        assert!((report.min_margin - (report.witness_value - report.witness_weight)).abs() < 1e-18);
    }

    #[test]
    fn empty_budget_is_vacuously_nondegenerate() {
        let omega = FrequencyVector::unperturbed(ms());
        let budget = ResonanceBudget::new(ms(), 2);
        let report = verify_dc(&omega, &params(), &budget);
        assert!(report.ok);
        assert_eq!(report.total, 0);
        assert!(report.witness.is_none());
    }

    #[test]
    fn growth_objective_matches_hand_expansion() {
        let omega = FrequencyVector::unperturbed(ms());
        let l = sv(&[(1, 2), (4, 1), (2, -3)]);
        assert_eq!(l.mass(), 0);
        assert_eq!(l.momentum(), 0);
        assert_eq!(l.quad_moment(), 6);
        let delta = 0.75;
        let w = k0_term(&l, delta, &params(), &omega).unwrap();
        // q = 4, base = 16 / (2^2 * 4 * 2^3) = 1/8, divisor = 6.
        assert_eq!(w.q, 4);
        let expect = (1.0f64 / 8.0).powf(delta) * 0.01 / 6.0;
        assert!((w.value - expect).abs() <= 1e-15 * expect);
        assert_eq!(w.alpha, MultiIndex::from_pairs(&[(1, 2), (4, 1)]));
        assert_eq!(w.beta, MultiIndex::from_pairs(&[(2, 3)]));
    }

    #[test]
    fn growth_supremum_is_monotone_in_delta_and_recomputable() {
        let omega = FrequencyVector::unperturbed(ms());
        let budget = ResonanceBudget::new(ms(), 8);
        let hi = k0_supremum(0.5, &params(), &budget, &omega).unwrap();
        let lo = k0_supremum(0.25, &params(), &budget, &omega).unwrap();
        assert!(hi.count > 0);
        assert!(hi.measured_sup > 0.0);
        assert!(hi.measured_sup <= lo.measured_sup);
        let re = hi.recompute(&omega, &ms()).unwrap();
        assert!((re - hi.measured_sup).abs() <= 1e-12 * hi.measured_sup);
    }

    #[test]
    fn tangential_only_budget_yields_empty_audit() {
        let omega = FrequencyVector::unperturbed(ms());
        let budget = ResonanceBudget::new(ms(), 4).with_normal_cap(0).unwrap();
        let audit = k0_supremum(0.5, &params(), &budget, &omega).unwrap();
        assert_eq!(audit.count, 0);
        assert!(audit.witness.is_none());
        assert_eq!(audit.measured_sup, 0.0);
    }

    #[test]
    fn measure_estimate_smoke_and_grid_monotonicity() {
        let budget = ResonanceBudget::new(ms(), 6);
        let report = measure_estimate(
            &params(),
            &budget,
            &[0.1, 0.05, 0.025],
            2000,
            7,
            &unperturbed_normal_map,
        )
        .unwrap();
        assert_eq!(report.n_samples, 2000);
        assert!(report.resonance_count > 0);
        assert!(report.rows[0].fraction >= report.rows[1].fraction);
        assert!(report.rows[1].fraction >= report.rows[2].fraction);
        for row in &report.rows {
            assert!(row.ci_low <= row.fraction && row.fraction <= row.ci_high);
            assert!(row.analytic_truncated > 0.0);
            assert!(row.analytic_tail_bound > 0.0);
        }
        assert!(report.worst_t.is_finite());
        assert!(report.worst_witness.is_some());

        let again = measure_estimate(
            &params(),
            &budget,
            &[0.1, 0.05, 0.025],
            2000,
            7,
            &unperturbed_normal_map,
        )
        .unwrap();
        for (a, b) in report.rows.iter().zip(again.rows.iter()) {
            assert_eq!(a.excluded, b.excluded);
        }
        assert_eq!(report.worst_t, again.worst_t);
    }

    #[test]
    fn empty_resonance_set_excludes_nothing() {
        let budget = ResonanceBudget::new(ms(), 2);
        let report = measure_estimate(
            &params(),
            &budget,
            &[0.1],
            500,
            3,
            &unperturbed_normal_map,
        )
        .unwrap();
        assert_eq!(report.rows[0].excluded, 0);
        assert!(report.worst_witness.is_none());
    }

    #[test]
    fn zero_samples_is_an_error() {
        let budget = ResonanceBudget::new(ms(), 4);
        assert!(matches!(
            measure_estimate(
                &params(),
                &budget,
                &[0.1],
                0,
                3,
                &unperturbed_normal_map
            ),
            Err(Error::NoSamples)
        ));
    }

    #[test]
    fn aux_lemma_validators_find_no_violations() {
        let report = aux_lemma_validators(10_000, 11);
        assert!(report.pass(), "{report:?}");
        assert!(report.worst_log_margin <= 0.0);
    }

    #[test]
    fn stacked_sum_single_term_case() {
        // N = 1, a = 1/2: x/sqrt(x) = sqrt(x) <= sqrt(x) + 4/sqrt(x).
        let x: f64 = 7.0;
        let a = 0.5;
        let lhs = x / x.powf(a);
        let rhs = x.powf(1.0 - a) + 2.0 / (a * x.powf(a));
        assert!(lhs <= rhs);
        assert!((lhs - x.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn log_decay_frozen_point() {
        let delta = (-4.0f64).exp();
        let y = 4.0 / delta * (1.0 / delta).ln();
        assert!((y - 16.0 * (4.0f64).exp()).abs() < 1e-9 * y);
        let f = -delta * y + (1.0 + y * y).ln();
        assert!(f <= 0.0);
        assert!(f < -2.0);
    }

    #[test]
    fn k0_constant_fit_dominates_measurements() {
        let omega = FrequencyVector::unperturbed(ms());
        let budget = ResonanceBudget::new(ms(), 8);
        let grid = [0.1, 0.2, 0.4, 0.8];
        let pts: Vec<(f64, f64)> = grid
            .iter()
            .map(|&d| {
                let audit = k0_supremum(d, &params(), &budget, &omega).unwrap();
                (d, audit.measured_sup)
            })
            .collect();
        let c = fit_k0_constant(&pts);
        for &(d, k0) in &pts {
            if k0 > 1.0 {
                assert!(k0.ln() <= c / d * (1.0 / d).ln().powi(2) + 1e-12);
            }
        }
    }
}
