//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("mode {mode} lies outside the truncated mode set [-{m_max}, {m_max}]")]
    ModeOutsideSet { mode: i32, m_max: i32 },

    #[error("largest tangential site 2^{h_max} exceeds the mode truncation {m_max}")]
    TangentialSpanExceedsTruncation { h_max: u32, m_max: i32 },

    #[error("mode truncation m_max = {0} must be at least 1")]
    EmptyModeSet(i32),

    #[error("frequency entry omega_{mode} = {value} violates |omega_j - j^2| < 1/2")]
    FrequencyOutsideBox { mode: i32, value: f64 },

    #[error("potential entry V_{mode} = {value} lies outside [-1/2, 1/2]")]
    PotentialOutsideBox { mode: i32, value: f64 },

    #[error("normal potential entry W_{mode} = {value} lies outside [-1/4, 1/4]")]
    NormalPotentialOutsideBox { mode: i32, value: f64 },

    #[error("degree cap {0} is odd; monomials come in matched (alpha, beta) degrees")]
    OddDegreeCap(u32),

    #[error("nonlinearity radius must be positive, got {0}")]
    NonpositiveRadius(f64),

    #[error("weighted norm needs r > 0 and finite p, got r = {r}, p = {p}")]
    BadNormParams { r: f64, p: f64 },

    #[error("Lipschitz seminorm needs at least two frequency samples, got {0}")]
    TooFewFrequencySamples(usize),

    #[error("degree selector {0} lies below the algebra floor -2")]
    DegreeBelowFloor(i64),

    #[error("torus actions leave the sampling ball: sup_j sqrt(I_j) <j>^p = {sup:e} exceeds r = {r:e}")]
    TorusOutsideBall { sup: f64, r: f64 },

    #[error("torus action I_{mode} = {value} is negative")]
    NegativeAction { mode: i32, value: f64 },

    #[error("gamma = {0} lies outside (0, 1/2]")]
    GammaOutsideRange(f64),

    #[error("tau = {0} lies below the admissible floor 2")]
    TauTooSmall(f64),

    #[error("the zero resonance vector carries no Diophantine weight")]
    ZeroResonanceVector,

    #[error("Monte Carlo estimate needs at least one sample")]
    NoSamples,

    #[error("homological data contains the kernel term alpha = beta = {key}")]
    KernelTerm { key: String },

    #[error("divisor |omega . l| = {divisor:e} falls below the Diophantine weight {weight:e} at l = {l}")]
    SmallDivisor { l: String, divisor: f64, weight: f64 },

    #[error("Lie series terms stopped decreasing at order {order} (norm {prev:e} -> {next:e})")]
    LieSeriesDiverging { order: usize, prev: f64, next: f64 },

    #[error("counterterm system is not a contraction: ||M||_inf = {0}")]
    CountertermNotContracting(f64),

    #[error("counterterm system is numerically singular")]
    CountertermSingular,

    #[error("iteration schedule needs rho <= r0/2, got rho = {rho}, r0 = {r0}")]
    ScheduleRadiusBudget { rho: f64, r0: f64 },

    #[error("frequency map iteration failed to settle after {0} rounds")]
    FrequencyMapDiverged(usize),

    #[error("normal-form check failed: residual degree <= 0 norm {residual:e} exceeds tolerance {tol:e}")]
    NotNormalForm { residual: f64, tol: f64 },

    #[error("{0}")]
    InvalidInput(String),
}
