//! Shared fixtures for the kernel benchmarks: a bounded sine potential, the
//! truncated NLS Hamiltonian it generates, and a generic frequency vector.

use std::sync::Arc;

use kamlab_core::{
    build_nls, diagonal_hamiltonian, FrequencyVector, HamiltonianPoly, Mode, ModeSet, ModeVector,
    NonlinearityModel,
};

pub fn default_mode_set() -> Arc<ModeSet> {
    Arc::new(ModeSet::default_truncation())
}

pub fn small_mode_set() -> Arc<ModeSet> {
    Arc::new(ModeSet::new(3, 8).expect("valid truncation"))
}

/// A potential strictly inside the box `|V_j| < 1/2`.
pub fn sine_potential(ms: &Arc<ModeSet>) -> ModeVector {
    ModeVector::from_fn(ms.clone(), |j: Mode| 0.2 * (1.3 * j as f64 + 0.7).sin())
}

/// Frequencies `j^2 + V_j` for the sine potential.
pub fn perturbed_frequencies(ms: &Arc<ModeSet>) -> FrequencyVector {
    let v = sine_potential(ms);
    FrequencyVector::from_fn(ms.clone(), |j| (j as f64) * (j as f64) + v.get(j))
        .expect("inside the frequency box")
}

/// The truncated cubic-NLS Hamiltonian (quartic polynomial) with the sine
/// potential on the diagonal.
pub fn nls_hamiltonian(ms: &Arc<ModeSet>, degree_cap: u32) -> HamiltonianPoly {
    let v = sine_potential(ms);
    let model = NonlinearityModel::new(vec![1.0], 1.0).expect("valid model");
    build_nls(&v, &model, degree_cap).expect("admissible potential")
}

/// The nonlinear part alone: NLS minus its diagonal, scaled to a given size.
pub fn nls_perturbation(ms: &Arc<ModeSet>, degree_cap: u32, scale: f64) -> HamiltonianPoly {
    let h = nls_hamiltonian(ms, degree_cap);
    let d = diagonal_hamiltonian(&perturbed_frequencies(ms), degree_cap);
    h.sub(&d).expect("same mode set").scaled_re(scale)
}
