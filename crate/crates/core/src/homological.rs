//! The diagonal Lie derivative, its inverse on range polynomials, and audits
//! tying the realized solution norms to the divisor-growth supremum.

use crate::dioph::{dioph_weight, enumerate_resonant_indices, k0_supremum, DiophParams,
    QuadMomentFilter, ResonanceBudget};
use crate::error::{Error, Result};
use crate::index::MultiIndex;
use crate::poly::{FrequencyVector, HamiltonianPoly, NormParams};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Applies the diagonal Lie derivative: each monomial is multiplied by
/// `i * omega . (alpha - beta)`. Kernel terms and the scalar are annihilated.
pub fn apply_lw(f: &HamiltonianPoly, omega: &FrequencyVector) -> HamiltonianPoly {
    let mut out = HamiltonianPoly::zero(f.mode_set().clone(), f.degree_cap());
    out = out.with_prune_rel(f.prune_rel());
    for (key, c) in f.terms() {
        let d = omega.dot(&key.resonance());
        if d == 0.0 {
            continue;
        }
        out.insert_term(key.alpha.clone(), key.beta.clone(), c * Complex64::new(0.0, d))
            .expect("transported terms stay admissible");
    }
    out.drop_zeros();
    out
}

/// Solution of the division problem together with its divisor statistics.
#[derive(Debug, Clone)]
pub struct HomologicalSolution {
    pub f: HamiltonianPoly,
    pub min_divisor: f64,
    /// Counts of `|omega . l|` by decimal magnitude: bin = floor(log10 |d|).
    pub divisor_histogram: BTreeMap<i32, u64>,
    /// Realized `||F||_{r, p+delta} / ||G||_{r, p}` (0 for empty input).
    pub norm_ratio: f64,
}

/// Divides each coefficient by `i * omega . (alpha - beta)`.
///
/// The input must be a pure range polynomial: kernel terms (including a nonzero
/// scalar) are rejected by name. Divisors smaller in magnitude than the
/// Diophantine weight of their index vector are refused rather than divided,
/// so every produced solution sits in the regime the growth estimates govern.
pub fn solve_homological(
    g: &HamiltonianPoly,
    omega: &FrequencyVector,
    dioph: &DiophParams,
    norm: &NormParams,
    delta: f64,
) -> Result<HomologicalSolution> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "weight increment delta = {delta} must be nonnegative"
        )));
    }
    if g.scalar() != Complex64::default() {
        return Err(Error::KernelTerm {
            key: "constant term".into(),
        });
    }
    let ms = g.mode_set().clone();
    let mut f = HamiltonianPoly::zero(ms.clone(), g.degree_cap());
    f = f.with_prune_rel(g.prune_rel());
    let mut min_divisor = f64::INFINITY;
    let mut histogram: BTreeMap<i32, u64> = BTreeMap::new();
    for (key, c) in g.terms() {
        if key.is_kernel() {
            return Err(Error::KernelTerm {
                key: key.to_string(),
            });
        }
        let l = key.resonance();
        let divisor = omega.dot(&l);
        let weight = dioph_weight(&l, &ms, dioph)?;
        if divisor.abs() < weight {
            return Err(Error::SmallDivisor {
                l: l.to_string(),
                divisor: divisor.abs(),
                weight,
            });
        }
        min_divisor = min_divisor.min(divisor.abs());
        *histogram
            .entry(divisor.abs().log10().floor() as i32)
            .or_default() += 1;
        // 1 / (i d) = -i / d.
        let coeff = c * Complex64::new(0.0, -1.0 / divisor);
        f.insert_term(key.alpha.clone(), key.beta.clone(), coeff)
            .expect("divided terms stay admissible");
    }
    let g_norm = g.weighted_norm(norm);
    let shifted = NormParams::new(norm.r, norm.p + delta)?;
    let norm_ratio = if g_norm > 0.0 {
        f.weighted_norm(&shifted) / g_norm
    } else {
        0.0
    };
    Ok(HomologicalSolution {
        f,
        min_divisor,
        divisor_histogram: histogram,
        norm_ratio,
    })
}

/// One row of the solver audit at a fixed weight increment.
#[derive(Debug, Clone)]
pub struct SolverAuditRow {
    pub delta: f64,
    /// Divisor-growth supremum measured over the budget.
    pub k0: f64,
    /// The asserted ceiling `K0 / gamma`.
    pub bound: f64,
    pub worst_ratio: f64,
    pub samples: usize,
    pub violations: u64,
}

/// Measures realized solution-norm ratios on random admissible inputs and
/// compares each against `K0(delta) / gamma`.
///
/// Samples are built from the budget's resonance vectors: a few minimal pairs
/// with random coefficients, optionally padded by a common tangential factor
/// (padding can only lower the ratio since every site weight is at least 2;
/// it keeps the at-most-two-normal-exponents hypothesis intact).
pub fn solver_norm_audit(
    omega: &FrequencyVector,
    dioph: &DiophParams,
    norm: &NormParams,
    budget: &ResonanceBudget,
    delta_grid: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<SolverAuditRow>> {
    let vectors =
        enumerate_resonant_indices(&budget.clone().with_filter(QuadMomentFilter::All));
    let ms = budget.mode_set().clone();
    let tangential = ms.tangential().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut samples: Vec<HamiltonianPoly> = Vec::with_capacity(n_samples);
    if !vectors.is_empty() {
        for _ in 0..n_samples {
            let mut g = HamiltonianPoly::zero(ms.clone(), u32::MAX);
            let n_terms = rng.gen_range(1..=5usize);
            for _ in 0..n_terms {
                let l = &vectors[rng.gen_range(0..vectors.len())];
                let (mut alpha, mut beta) = l.decompose();
                if rng.gen_bool(0.5) {
                    let site = tangential[rng.gen_range(0..tangential.len())];
                    let pad = MultiIndex::from_pairs(&[(site, rng.gen_range(1..=2u32))]);
                    alpha = alpha.add(&pad);
                    beta = beta.add(&pad);
                }
                let c = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                g.insert_term(alpha, beta, c)?;
            }
            g.drop_zeros();
            if !g.is_zero() {
                samples.push(g);
            }
        }
    }

    let mut rows = Vec::with_capacity(delta_grid.len());
    for &delta in delta_grid {
        let audit = k0_supremum(delta, dioph, budget, omega)?;
        let bound = audit.measured_sup / dioph.gamma;
        let mut worst = 0.0f64;
        let mut violations = 0u64;
        for g in &samples {
            let sol = solve_homological(g, omega, dioph, norm, delta)?;
            worst = worst.max(sol.norm_ratio);
            if sol.norm_ratio > bound * (1.0 + 1e-12) {
                violations += 1;
            }
        }
        rows.push(SolverAuditRow {
            delta,
            k0: audit.measured_sup,
            bound,
            worst_ratio: worst,
            samples: samples.len(),
            violations,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dioph::verify_dc;
    use crate::index::{weight_base, Mode, ModeSet};
    use crate::poly::random_real_hamiltonian;
    use crate::centered::{plain_kernel_part, plain_range_part};
    use std::sync::Arc;

    fn ms() -> Arc<ModeSet> {
        Arc::new(ModeSet::default_truncation())
    }

    fn mono(alpha: &[(Mode, u32)], beta: &[(Mode, u32)], c: Complex64) -> HamiltonianPoly {
        let mut h = HamiltonianPoly::zero(ms(), 16);
        h.insert_term(
            MultiIndex::from_pairs(alpha),
            MultiIndex::from_pairs(beta),
            c,
        )
        .unwrap();
        h
    }

    /// A fixed frequency vector that passes the nondegeneracy check at the
    /// default budget (asserted in tests before use).
    fn generic_omega() -> FrequencyVector {
        FrequencyVector::from_fn(ms(), |j| {
            let j_f = j as f64;
            j_f * j_f + 0.45 * (1.3 * j_f + 0.7).sin()
        })
        .unwrap()
    }

    #[test]
    fn lie_derivative_annihilates_kernel_terms() {
        let omega = FrequencyVector::unperturbed(ms());
        let g = mono(&[(1, 2)], &[(1, 2)], Complex64::new(3.0, 0.0));
        let out = apply_lw(&g, &omega);
        assert!(out.is_zero());
    }

    #[test]
    fn lie_derivative_multiplies_by_the_quad_moment() {
        let omega = FrequencyVector::unperturbed(ms());
        let g = mono(&[(3, 1), (5, 1)], &[(4, 2)], Complex64::new(0.7, -0.2));
        let out = apply_lw(&g, &omega);
        let got = out.coefficient_of(&[(3, 1), (5, 1)], &[(4, 2)]);
        let expect = Complex64::new(0.7, -0.2) * Complex64::new(0.0, 2.0);
        assert!((got - expect).norm() <= 1e-15 * expect.norm());
    }

    #[test]
    fn lie_derivative_is_linear() {
        let omega = generic_omega();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_real_hamiltonian(&mut rng, &ms(), 6, 12);
        let b = random_real_hamiltonian(&mut rng, &ms(), 6, 12);
        let lhs = apply_lw(&a.add(&b).unwrap(), &omega);
        let rhs = apply_lw(&a, &omega).add(&apply_lw(&b, &omega)).unwrap();
        let diff = lhs.sub(&rhs).unwrap();
        let scale = lhs.max_abs_coefficient().max(1e-300);
        assert!(diff.max_abs_coefficient() <= 1e-14 * scale);
    }

    #[test]
    fn division_matches_hand_value() {
        let omega = FrequencyVector::unperturbed(ms());
        let dioph = DiophParams::new(0.01, 2.0).unwrap();
        let norm = NormParams::new(1.0, 1.0).unwrap();
        let g = mono(&[(3, 1), (5, 1)], &[(4, 2)], Complex64::new(1.0, 0.0));
        let sol = solve_homological(&g, &omega, &dioph, &norm, 0.5).unwrap();
        let got = sol.f.coefficient_of(&[(3, 1), (5, 1)], &[(4, 2)]);
        // 1 / (2i) = -i/2.
        assert!((got - Complex64::new(0.0, -0.5)).norm() < 1e-15);
        assert_eq!(sol.min_divisor, 2.0);
        assert_eq!(sol.divisor_histogram.get(&0), Some(&1));

        // Applying the derivative recovers the input.
        let back = apply_lw(&sol.f, &omega);
        let diff = back.sub(&g).unwrap();
        assert!(diff.max_abs_coefficient() <= 1e-12);
    }

    #[test]
    fn kernel_terms_are_rejected_by_name() {
        let omega = FrequencyVector::unperturbed(ms());
        let dioph = DiophParams::new(0.01, 2.0).unwrap();
        let norm = NormParams::new(1.0, 1.0).unwrap();
        let g = mono(&[(1, 2)], &[(1, 2)], Complex64::new(1.0, 0.0));
        match solve_homological(&g, &omega, &dioph, &norm, 0.1) {
            Err(Error::KernelTerm { key }) => {
                assert!(key.contains("1:2"), "key = {key}");
            }
            other => panic!("expected kernel rejection, got {other:?}"),
        }
        let mut with_scalar = HamiltonianPoly::zero(ms(), 8);
        with_scalar.add_scalar(Complex64::new(1.0, 0.0));
        assert!(matches!(
            solve_homological(&with_scalar, &omega, &dioph, &norm, 0.1),
            Err(Error::KernelTerm { .. })
        ));
    }

    #[test]
    fn vanishing_divisors_are_refused() {
        // alpha - beta = -2e_1 + e_4 - e_8 + e_{-1} + e_7 has quadratic moment
        // -2 + 16 - 64 + 1 + 49 = 0, an exact resonance of the integer frequencies.
        let omega = FrequencyVector::unperturbed(ms());
        let dioph = DiophParams::new(0.01, 2.0).unwrap();
        let norm = NormParams::new(1.0, 1.0).unwrap();
        let g = mono(
            &[(-1, 1), (4, 1), (7, 1)],
            &[(1, 2), (8, 1)],
            Complex64::new(1.0, 0.0),
        );
        match solve_homological(&g, &omega, &dioph, &norm, 0.1) {
            Err(Error::SmallDivisor { divisor, weight, .. }) => {
                assert_eq!(divisor, 0.0);
                assert!(weight > 0.0);
            }
            other => panic!("expected small-divisor refusal, got {other:?}"),
        }
    }

    #[test]
    fn roundtrip_recovers_random_range_polynomials() {
        let omega = generic_omega();
        let dioph = DiophParams::new(0.01, 2.0).unwrap();
        let norm = NormParams::new(1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..5 {
            let h = random_real_hamiltonian(&mut rng, &ms(), 6, 20);
            let mut f0 = plain_range_part(&h);
            f0.drop_zeros();
            if f0.is_zero() {
                continue;
            }
            let g = apply_lw(&f0, &omega);
            let sol = solve_homological(&g, &omega, &dioph, &norm, 0.0).unwrap();
            let diff = sol.f.sub(&f0).unwrap();
            let scale = f0.max_abs_coefficient();
            assert!(
                diff.max_abs_coefficient() <= 1e-12 * scale,
                "trial {trial}: defect {}",
                diff.max_abs_coefficient()
            );
            // And the other composition order.
            let kernel_free = plain_kernel_part(&sol.f);
            assert!(kernel_free.is_zero() || kernel_free.num_terms() == 0);
        }
    }

    #[test]
    fn empty_input_has_zero_ratio() {
        let omega = generic_omega();
        let dioph = DiophParams::new(0.01, 2.0).unwrap();
        let norm = NormParams::new(1.0, 1.0).unwrap();
        let g = HamiltonianPoly::zero(ms(), 8);
        let sol = solve_homological(&g, &omega, &dioph, &norm, 0.3).unwrap();
        assert_eq!(sol.norm_ratio, 0.0);
        assert!(sol.f.is_zero());
        assert!(sol.min_divisor.is_infinite());
    }

    #[test]
    fn single_monomial_ratio_matches_first_principles() {
        let omega = FrequencyVector::unperturbed(ms());
        let dioph = DiophParams::new(0.01, 2.0).unwrap();
        let r = 1.0;
        let p = 1.0;
        let delta = 0.5;
        let norm = NormParams::new(r, p).unwrap();
        let g = mono(&[(3, 1), (5, 1)], &[(4, 2)], Complex64::new(1.0, 0.0));
        let sol = solve_homological(&g, &omega, &dioph, &norm, delta).unwrap();

        // Majorant norm of the monomial at (r, q): (1/2) max_j (a+b)_j w^{a+b}/w_j^2.
        let norm_at = |q: f64| -> f64 {
            let w = |j: Mode| r * weight_base(j).powf(-q);
            let big_w = w(3) * w(5) * w(4) * w(4);
            let rows = [
                big_w / (w(3) * w(3)),
                big_w / (w(5) * w(5)),
                2.0 * big_w / (w(4) * w(4)),
            ];
            0.5 * rows.iter().fold(0.0f64, |m, v| m.max(*v))
        };
        let expect = (norm_at(p + delta) / 2.0) / norm_at(p);
        assert!(
            (sol.norm_ratio - expect).abs() <= 1e-14 * expect,
            "got {} expected {expect}",
            sol.norm_ratio
        );
    }

    #[test]
    fn audit_stays_below_the_growth_bound() {
        let omega = generic_omega();
        let dioph = DiophParams::new(0.01, 2.0).unwrap();
        let norm = NormParams::new(1.0, 1.0).unwrap();
        let budget = ResonanceBudget::new(ms(), 6);
        let dc = verify_dc(&omega, &dioph, &budget);
        assert!(dc.ok, "test frequencies must pass the condition");
        let rows = solver_norm_audit(
            &omega,
            &dioph,
            &norm,
            &budget,
            &[0.1, 0.2, 0.4, 0.8],
            40,
            41,
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        for row in &rows {
            assert!(row.samples > 0);
            assert_eq!(row.violations, 0, "delta = {}", row.delta);
            assert!(row.worst_ratio <= row.bound);
            assert!(row.k0 > 0.0);
        }
        // Larger weight increments can only shrink the realized ratios.
        for pair in rows.windows(2) {
            assert!(pair[1].worst_ratio <= pair[0].worst_ratio + 1e-15);
        }
    }
}
