//! Experiment configuration: JSON schema, defaults, validation, resolution.
//!
//! A configuration file may specify any subset of the fields below; every
//! omitted field takes its documented default, and `resolve` materializes the
//! defaults back into the struct so reports echo the exact experiment that
//! ran.  All numeric constraints are enforced here, before any pipeline runs:
//! the schedule margin budget (`rho <= r0/2`), the normal-potential box
//! (`|W_j| <= 1/4`), the full-potential box (`|V_j| < 1/2`), and the torus
//! ball bound.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use kamlab_core::{
    weight_base, DiophParams, FrequencyVector, KamSchedule, Mode, ModeSet, ModeVector,
    NonlinearityModel, ResonanceBudget, TorusData,
};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode_set: ModeSetConfig,
    pub torus: TorusConfig,
    pub nonlinearity: NonlinearityConfig,
    pub potential: PotentialConfig,
    pub dioph: DiophConfig,
    pub schedule: ScheduleConfig,
    pub truncation: TruncationConfig,
    pub run: RunConfig,
    pub audit: AuditConfig,
    pub trajectory: TrajectoryConfig,
    pub tolerances: ToleranceConfig,
    pub output: OutputConfig,
}

/// Tangential sites are the powers of two `{2^h : h <= h_max}`; every other
/// integer in `[-m_max, m_max]` is a normal site.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeSetConfig {
    pub h_max: u32,
    pub m_max: i32,
}

impl Default for ModeSetConfig {
    fn default() -> Self {
        Self { h_max: 4, m_max: 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TorusConfig {
    /// Torus ball radius; default: the schedule's maximal torus radius.
    pub r: Option<f64>,
    /// Torus weight exponent; default: the schedule's starting exponent `p0`.
    pub p: Option<f64>,
    pub profile: ActionProfile,
}

impl Default for TorusConfig {
    fn default() -> Self {
        Self {
            r: None,
            p: None,
            profile: ActionProfile::default(),
        }
    }
}

/// Action profile over the tangential sites, in terms of `sqrt(I_j)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum ActionProfile {
    /// `sqrt(I_j) = amplitude` on every tangential site.
    Flat { amplitude: Option<f64> },
    /// `sqrt(I_j) = amplitude * <<j>>^{-exponent}`; the default exponent is
    /// the schedule's limiting smoothness, so the torus stays admissible at
    /// every step of the iteration.
    PowerLaw {
        amplitude: Option<f64>,
        exponent: Option<f64>,
    },
}

impl Default for ActionProfile {
    fn default() -> Self {
        ActionProfile::PowerLaw {
            amplitude: None,
            exponent: None,
        }
    }
}

/// `f(y) = sum_k taylor[k] y^{k+1}` on `|y| < radius`; `scale` multiplies the
/// assembled nonlinear part of the Hamiltonian (the perturbation size).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonlinearityConfig {
    pub taylor: Vec<f64>,
    pub radius: f64,
    pub scale: f64,
}

impl Default for NonlinearityConfig {
    fn default() -> Self {
        Self {
            taylor: vec![1.0],
            radius: 1.0,
            scale: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PotentialConfig {
    pub tangential: SinePotential,
    pub normal: SinePotential,
}

/// `value(j) = amplitude * sin(wavenumber * j + phase)`, plus per-mode
/// overrides given as `[mode, value]` pairs that replace the sine value.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinePotential {
    pub amplitude: f64,
    pub wavenumber: f64,
    pub phase: f64,
    pub overrides: Vec<(Mode, f64)>,
}

impl Default for SinePotential {
    fn default() -> Self {
        Self {
            amplitude: 0.2,
            wavenumber: 1.3,
            phase: 0.7,
            overrides: Vec::new(),
        }
    }
}

impl SinePotential {
    fn value(&self, j: Mode) -> f64 {
        for &(m, v) in &self.overrides {
            if m == j {
                return v;
            }
        }
        self.amplitude * (self.wavenumber * j as f64 + self.phase).sin()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiophConfig {
    pub gamma: f64,
    pub tau: f64,
    pub l_max: u32,
}

impl Default for DiophConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-3,
            tau: 2.0,
            l_max: 6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub r0: f64,
    pub rho: f64,
    pub p0: f64,
    pub delta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            r0: 1e-3,
            rho: 4e-4,
            p0: 2.0,
            delta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruncationConfig {
    /// Even cap on the plain monomial degree kept by all polynomial algebra.
    pub degree_cap: u32,
    /// Cap on the number of Lie-series orders summed per transform.
    pub order_cap: usize,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            degree_cap: 6,
            order_cap: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n_steps: usize,
    pub seed: u64,
    pub n_samples: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_steps: 4,
            seed: 2024,
            n_samples: 10_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    /// Weight increments probed by the divisor-growth audit.
    pub delta_grid: Vec<f64>,
    /// Nondegeneracy thresholds probed by the measure estimate.
    pub gamma_grid: Vec<f64>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            delta_grid: vec![0.4, 0.2, 0.1, 0.05],
            gamma_grid: vec![0.1, 0.05, 0.025],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    /// Sample times for the space-time grid.
    pub times: Vec<f64>,
    /// Number of equispaced spatial points on `[0, 2 pi)`.
    pub x_points: usize,
    /// Base time for the regularity probe.
    pub t0: f64,
    /// Time increments for the regularity probe.
    pub increments: Vec<f64>,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            times: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            x_points: 64,
            t0: 0.0,
            increments: (0..8).map(|k| 1e-3 * f64::powi(2.0, k)).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceConfig {
    /// Acceptance threshold on the sampled invariance residual.
    pub torus_residual: f64,
    /// Acceptance threshold on the weighted low-degree defect of the final
    /// normal form.
    pub normal_form_defect: f64,
    /// Number of random torus phases sampled by the residual check.
    pub residual_samples: usize,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self {
            torus_residual: 1e-8,
            normal_form_defect: 1e-8,
            residual_samples: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "kamlab-out".into(),
        }
    }
}

/// A validated configuration with every derived object already built.
#[derive(Debug)]
pub struct Resolved {
    /// The configuration with all defaults materialized (reports echo this).
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
    pub mode_set: Arc<ModeSet>,
    pub schedule: KamSchedule,
    pub dioph: DiophParams,
    pub budget: ResonanceBudget,
    pub model: NonlinearityModel,
    /// Combined potential: tangential values on tangential sites, normal
    /// values elsewhere.
    pub potential: ModeVector,
    pub omega: FrequencyVector,
    pub torus: TorusData,
}

pub fn load_config(path: Option<&Path>) -> Result<Resolved> {
    let config = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading configuration file {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing configuration file {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    resolve(config)
}

pub fn resolve(mut config: ExperimentConfig) -> Result<Resolved> {
    let mut warnings = Vec::new();

    let mode_set = Arc::new(
        ModeSet::new(config.mode_set.h_max, config.mode_set.m_max)
            .map_err(|e| anyhow!("mode_set: {e}"))?,
    );

    let s = &config.schedule;
    let schedule = KamSchedule::new(s.r0, s.rho, s.p0, s.delta)
        .map_err(|e| anyhow!("schedule: {e}"))?;

    let d = &config.dioph;
    let dioph = DiophParams::new(d.gamma, d.tau).map_err(|e| anyhow!("dioph: {e}"))?;
    if d.l_max == 0 {
        bail!("dioph.l_max: the resonance budget needs at least one unit of index mass");
    }
    let budget = ResonanceBudget::new(mode_set.clone(), d.l_max);

    let nl = &config.nonlinearity;
    let model = NonlinearityModel::new(nl.taylor.clone(), nl.radius)
        .map_err(|e| anyhow!("nonlinearity: {e}"))?;
    if !nl.scale.is_finite() {
        bail!("nonlinearity.scale: must be finite, got {}", nl.scale);
    }

    let t = &config.truncation;
    if t.degree_cap < 2 || t.degree_cap % 2 != 0 {
        bail!(
            "truncation.degree_cap: must be an even integer >= 2, got {}",
            t.degree_cap
        );
    }
    if t.order_cap == 0 {
        bail!("truncation.order_cap: at least one Lie order is required");
    }

    if config.run.n_samples == 0 {
        bail!("run.n_samples: sampling commands need at least one sample");
    }
    for (name, grid) in [
        ("audit.delta_grid", &config.audit.delta_grid),
        ("audit.gamma_grid", &config.audit.gamma_grid),
    ] {
        if grid.is_empty() {
            bail!("{name}: must not be empty");
        }
        if grid.iter().any(|v| !v.is_finite()) {
            bail!("{name}: entries must be finite");
        }
    }
    if config.trajectory.x_points == 0 {
        bail!("trajectory.x_points: the spatial grid must not be empty");
    }
    if config.tolerances.residual_samples == 0 {
        bail!("tolerances.residual_samples: at least one phase sample is required");
    }

    check_overrides(
        "potential.tangential",
        &config.potential.tangential.overrides,
        mode_set.tangential(),
    )?;
    check_overrides(
        "potential.normal",
        &config.potential.normal.overrides,
        mode_set.normal(),
    )?;

    let potential = ModeVector::from_fn(mode_set.clone(), |j| {
        if mode_set.is_tangential(j) {
            config.potential.tangential.value(j)
        } else {
            config.potential.normal.value(j)
        }
    });
    for j in mode_set.tangential() {
        let v = potential.get(*j);
        if !v.is_finite() || v.abs() >= 0.5 {
            bail!(
                "potential.tangential: |V_{j}| = {} leaves the open box (-1/2, 1/2) \
                 required of every frequency offset",
                v.abs()
            );
        }
    }
    for j in mode_set.normal() {
        let w = potential.get(*j);
        if !w.is_finite() || w.abs() > 0.25 {
            bail!(
                "potential.normal: |W_{j}| = {} exceeds the normal-potential box [-1/4, 1/4]",
                w.abs()
            );
        }
    }
    if potential.get(0) == 0.0 {
        warnings.push(
            "W_0 = 0: the frequency-map nondegeneracy argument needs W_0 != 0; \
             continuing, but the counterterm inversion may be singular"
                .to_string(),
        );
    }

    let omega = FrequencyVector::from_fn(mode_set.clone(), |j| {
        (j as f64) * (j as f64) + potential.get(j)
    })
    .map_err(|e| anyhow!("potential: {e}"))?;

    // Torus resolution: fill in defaults, then build (the constructor enforces
    // the ball bound sup_j sqrt(I_j) <<j>>^p <= r).
    let p_limit = schedule.smoothness_limit();
    let r = config.torus.r.unwrap_or_else(|| schedule.max_torus_radius());
    let p = config.torus.p.unwrap_or_else(|| schedule.p0());
    if !(r > 0.0) || !r.is_finite() {
        bail!("torus.r: must be a positive radius, got {r}");
    }
    config.torus.r = Some(r);
    config.torus.p = Some(p);
    let profile = match config.torus.profile {
        ActionProfile::Flat { amplitude } => {
            let amplitude =
                amplitude.unwrap_or_else(|| {
                    0.5 * r * weight_base(config.mode_set.m_max).powf(-p_limit)
                });
            ActionProfile::Flat {
                amplitude: Some(amplitude),
            }
        }
        ActionProfile::PowerLaw { amplitude, exponent } => {
            let amplitude = amplitude.unwrap_or(0.5 * r);
            let exponent = exponent.unwrap_or(p_limit);
            ActionProfile::PowerLaw {
                amplitude: Some(amplitude),
                exponent: Some(exponent),
            }
        }
    };
    config.torus.profile = profile.clone();
    let sqrt_action = move |j: Mode| -> f64 {
        match &profile {
            ActionProfile::Flat { amplitude } => amplitude.expect("resolved"),
            ActionProfile::PowerLaw { amplitude, exponent } => {
                amplitude.expect("resolved") * weight_base(j).powf(-exponent.expect("resolved"))
            }
        }
    };
    let torus = TorusData::from_fn(mode_set.clone(), |j| sqrt_action(j).powi(2), r, p)
        .map_err(|e| anyhow!("torus: {e}"))?;

    Ok(Resolved {
        config,
        warnings,
        mode_set,
        schedule,
        dioph,
        budget,
        model,
        potential,
        omega,
        torus,
    })
}

fn check_overrides(field: &str, overrides: &[(Mode, f64)], allowed: &[Mode]) -> Result<()> {
    for (i, &(j, v)) in overrides.iter().enumerate() {
        if !allowed.contains(&j) {
            bail!("{field}.overrides[{i}]: mode {j} is not in the {field} site class");
        }
        if !v.is_finite() {
            bail!("{field}.overrides[{i}]: value for mode {j} must be finite");
        }
        if overrides[..i].iter().any(|&(m, _)| m == j) {
            bail!("{field}.overrides[{i}]: duplicate override for mode {j}");
        }
    }
    Ok(())
}
