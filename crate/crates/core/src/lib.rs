//! Core algebra for a truncated normal-form laboratory: sparse mode algebra,
//! majorant-weighted Hamiltonian polynomials, torus-centered decompositions,
//! small-divisor audits, homological solvers and the iterative pipeline.

pub mod centered;
pub mod dioph;
pub mod error;
pub mod homological;
pub mod index;
pub mod kam;
pub mod poly;

pub use centered::{
    extract_counterterm, is_normal_form, normal_form_defect, plain_degree_part, plain_kernel_part,
    plain_range_part, to_centered, CenteredKey, CenteredPoly, CounterTerm, DegreeSelector,
    TorusData,
};
pub use dioph::{
    aux_lemma_validators, dioph_weight, enumerate_resonant_indices, fit_k0_constant, k0_supremum,
    k0_term, measure_estimate, unit_dioph_weight, unperturbed_normal_map, verify_dc, AngleBracket,
    AuxLemmaReport, DcReport, DiophParams, K0Audit, K0Witness, MeasureReport, MeasureRow,
    QuadMomentFilter, ResonanceBudget,
};
pub use error::{Error, Result};
pub use homological::{
    apply_lw, solve_homological, solver_norm_audit, HomologicalSolution, SolverAuditRow,
};
pub use index::{is_admissible_pair, weight_base, Mode, ModeSet, MultiIndex, SignedIndexVector};
pub use kam::{
    apply_normalizing_map, flow_time_one, holder_time_exponent, inverse_flow_time_one, kam_step,
    lie_transform, run_kam, sample_trajectory, solve_counterterm, solve_frequency_map,
    torus_residual, ConvergenceRow, CorrectionOperator, CounterTermSolution, CounterTermSystem,
    FrequencySolution, KamOptions, KamSchedule, KamState, LieExpansion, PipelineResult,
    RunOptions, RunStatus, StepReport, CONTRACTION_EXPONENT, EPSILON_FLOOR, SMALLNESS_THRESHOLD,
};
pub use poly::{
    build_nls, diagonal_hamiltonian, lipschitz_norm, poisson_bracket, random_real_hamiltonian,
    FrequencyVector, HamiltonianPoly, ModeVector, NonlinearityModel, NormParams, PhasePoint,
    TermKey, TermRecord,
};
