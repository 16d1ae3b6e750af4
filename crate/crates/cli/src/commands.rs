//! Command drivers: each one runs a pipeline, writes its report files, and
//! returns whether every assertion it checks passed.

use std::path::PathBuf;

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use kamlab_core::{
    build_nls, diagonal_hamiltonian, fit_k0_constant, k0_supremum, torus_residual, verify_dc,
    DcReport, HamiltonianPoly, K0Audit, KamOptions, ModeVector, MultiIndex, NormParams,
    PipelineResult, RunOptions, RunStatus, SignedIndexVector, EPSILON_FLOOR, SMALLNESS_THRESHOLD,
};

use crate::config::Resolved;
use crate::report::{
    convergence_csv, convergence_rows_json, csv_num, num, write_json, write_text,
};

pub struct Ctx {
    pub resolved: Resolved,
    pub out_dir: PathBuf,
    pub verbose: bool,
}

impl Ctx {
    fn note(&self, msg: &str) {
        if self.verbose {
            eprintln!("kamlab: {msg}");
        }
    }
}

pub struct Outcome {
    pub passed: bool,
    pub summary: String,
}

/// Shared report skeleton: command name, echoed config, configuration
/// warnings, and the truncation block.
fn base_report(ctx: &Ctx, command: &str) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("command".into(), Value::String(command.into()));
    m.insert(
        "config".into(),
        serde_json::to_value(&ctx.resolved.config).expect("config serializes"),
    );
    m.insert(
        "config_warnings".into(),
        Value::Array(
            ctx.resolved
                .warnings
                .iter()
                .map(|w| Value::String(w.clone()))
                .collect(),
        ),
    );
    let mut t = Map::new();
    t.insert(
        "h_max".into(),
        Value::from(ctx.resolved.config.mode_set.h_max),
    );
    t.insert(
        "m_max".into(),
        Value::from(ctx.resolved.config.mode_set.m_max),
    );
    t.insert(
        "degree_cap".into(),
        Value::from(ctx.resolved.config.truncation.degree_cap),
    );
    t.insert("l_max".into(), Value::from(ctx.resolved.config.dioph.l_max));
    t.insert(
        "order_cap".into(),
        Value::from(ctx.resolved.config.truncation.order_cap as u64),
    );
    m.insert("truncation".into(), Value::Object(t));
    m
}

fn signed_vector_json(l: &SignedIndexVector) -> Value {
    Value::Array(
        l.iter()
            .map(|(j, c)| Value::Array(vec![Value::from(j), Value::from(c)]))
            .collect(),
    )
}

fn multi_index_json(m: &MultiIndex) -> Value {
    Value::Array(
        m.iter()
            .map(|(j, k)| Value::Array(vec![Value::from(j), Value::from(k)]))
            .collect(),
    )
}

fn mode_vector_json(v: &ModeVector) -> Value {
    Value::Array(
        v.iter()
            .map(|(j, x)| Value::Array(vec![Value::from(j), num(x)]))
            .collect(),
    )
}

fn dc_json(report: &DcReport) -> Value {
    let mut m = Map::new();
    m.insert("ok".into(), Value::Bool(report.ok));
    m.insert("total".into(), Value::from(report.total as u64));
    m.insert("prefiltered".into(), Value::from(report.prefiltered as u64));
    m.insert("min_margin".into(), num(report.min_margin));
    m.insert("min_ratio".into(), num(report.min_ratio));
    match &report.witness {
        Some(l) => {
            let mut w = Map::new();
            w.insert("components".into(), signed_vector_json(l));
            w.insert("value".into(), num(report.witness_value));
            w.insert("weight".into(), num(report.witness_weight));
            w.insert("one_norm".into(), Value::from(l.one_norm()));
            w.insert("quad_moment".into(), Value::from(l.quad_moment()));
            m.insert("witness".into(), Value::Object(w));
        }
        None => {
            m.insert("witness".into(), Value::Null);
        }
    }
    Value::Object(m)
}

fn poly_stats_json(h: &HamiltonianPoly, params: &NormParams) -> Value {
    let mut m = Map::new();
    m.insert("term_count".into(), Value::from(h.terms().count() as u64));
    m.insert("one_norm".into(), num(h.one_norm()));
    m.insert("weighted_norm".into(), num(h.weighted_norm(params)));
    m.insert("scalar_re".into(), num(h.scalar().re));
    m.insert("scalar_im".into(), num(h.scalar().im));
    m.insert("pruned_mass".into(), num(h.pruned_mass()));
    m.insert(
        "truncation_discard_mass".into(),
        num(h.cap_discard_mass()),
    );
    Value::Object(m)
}

// ---------------------------------------------------------------------------
// build-nls
// ---------------------------------------------------------------------------

pub fn build_nls_cmd(ctx: &Ctx) -> Result<Outcome> {
    let r = &ctx.resolved;
    ctx.note("assembling the truncated Hamiltonian");
    let h = build_nls(&r.potential, &r.model, r.config.truncation.degree_cap)?;
    let params = r.torus.norm_params();

    // degree histogram, ascending
    let mut by_degree: Vec<(u32, u64)> = Vec::new();
    for (key, _) in h.terms() {
        let d = key.alpha.total() + key.beta.total();
        match by_degree.binary_search_by_key(&d, |&(deg, _)| deg) {
            Ok(i) => by_degree[i].1 += 1,
            Err(i) => by_degree.insert(i, (d, 1)),
        }
    }

    // largest coefficients, ties broken by key order so the list is stable
    let mut terms: Vec<_> = h.terms().collect();
    terms.sort_by(|a, b| {
        b.1.norm()
            .partial_cmp(&a.1.norm())
            .expect("finite coefficients")
            .then_with(|| a.0.cmp(b.0))
    });
    let top_terms: Vec<Value> = terms
        .iter()
        .take(12)
        .map(|(key, c)| {
            let mut m = Map::new();
            m.insert("alpha".into(), multi_index_json(&key.alpha));
            m.insert("beta".into(), multi_index_json(&key.beta));
            m.insert("re".into(), num(c.re));
            m.insert("im".into(), num(c.im));
            Value::Object(m)
        })
        .collect();

    let mut report = base_report(ctx, "build-nls");
    report.insert("hamiltonian".into(), poly_stats_json(&h, &params));
    report.insert(
        "terms_by_degree".into(),
        Value::Array(
            by_degree
                .iter()
                .map(|&(d, n)| Value::Array(vec![Value::from(d), Value::from(n)]))
                .collect(),
        ),
    );
    report.insert("largest_terms".into(), Value::Array(top_terms));
    report.insert("potential".into(), mode_vector_json(&r.potential));
    report.insert("passed".into(), Value::Bool(true));

    let path = write_json(&ctx.out_dir, "build_nls.json", &Value::Object(report))?;
    Ok(Outcome {
        passed: true,
        summary: format!(
            "{} terms, weighted norm {:.3e} -> {}",
            h.terms().count(),
            h.weighted_norm(&params),
            path.display()
        ),
    })
}

// ---------------------------------------------------------------------------
// dioph-audit
// ---------------------------------------------------------------------------

pub fn dioph_audit_cmd(ctx: &Ctx) -> Result<Outcome> {
    let r = &ctx.resolved;
    ctx.note("enumerating the resonance budget");
    let dc = verify_dc(&r.omega, &r.dioph, &r.budget);
    let mut report = base_report(ctx, "dioph-audit");
    report.insert("dioph".into(), dc_json(&dc));
    report.insert("passed".into(), Value::Bool(dc.ok));
    let path = write_json(&ctx.out_dir, "dioph_audit.json", &Value::Object(report))?;
    Ok(Outcome {
        passed: dc.ok,
        summary: format!(
            "{} vectors, min margin {:.3e} -> {}",
            dc.total,
            dc.min_margin,
            path.display()
        ),
    })
}

// ---------------------------------------------------------------------------
// k0-audit
// ---------------------------------------------------------------------------

fn k0_row_json(audit: &K0Audit, recomputed: Option<f64>) -> Value {
    let mut m = Map::new();
    m.insert("delta".into(), num(audit.delta));
    m.insert("gamma".into(), num(audit.gamma));
    m.insert("measured_sup".into(), num(audit.measured_sup));
    m.insert("sup_at_unit_gamma".into(), num(audit.sup_at_unit_gamma()));
    m.insert("count".into(), Value::from(audit.count as u64));
    match &audit.witness {
        Some(w) => {
            let mut wj = Map::new();
            wj.insert("alpha".into(), multi_index_json(&w.alpha));
            wj.insert("beta".into(), multi_index_json(&w.beta));
            wj.insert("q".into(), Value::from(w.q));
            wj.insert("value".into(), num(w.value));
            wj.insert(
                "recomputed".into(),
                recomputed.map(num).unwrap_or(Value::Null),
            );
            m.insert("witness".into(), Value::Object(wj));
        }
        None => {
            m.insert("witness".into(), Value::Null);
        }
    }
    Value::Object(m)
}

pub fn k0_audit_cmd(ctx: &Ctx) -> Result<Outcome> {
    let r = &ctx.resolved;
    let mut rows = Vec::new();
    let mut points = Vec::new();
    let mut consistent = true;
    for &delta in &r.config.audit.delta_grid {
        ctx.note(&format!("divisor-growth sweep at delta = {delta}"));
        let audit = k0_supremum(delta, &r.dioph, &r.budget, &r.omega)?;
        let recomputed = audit.recompute(&r.omega, &r.mode_set);
        if let Some(v) = recomputed {
            if (v - audit.measured_sup).abs() > 1e-12 * audit.measured_sup.max(1.0) {
                consistent = false;
            }
        }
        // Fit the shape on the gamma-normalized supremum: the raw value is
        // linear in gamma, so at small thresholds every point sits below 1
        // and would leave the fit unconstrained.
        points.push((delta, audit.sup_at_unit_gamma()));
        rows.push(k0_row_json(&audit, recomputed));
    }
    let fitted = fit_k0_constant(&points);
    let mut report = base_report(ctx, "k0-audit");
    report.insert("rows".into(), Value::Array(rows));
    report.insert("fitted_shape_constant".into(), num(fitted));
    report.insert("passed".into(), Value::Bool(consistent));
    let path = write_json(&ctx.out_dir, "k0_audit.json", &Value::Object(report))?;
    Ok(Outcome {
        passed: consistent,
        summary: format!(
            "{} deltas, fitted shape constant {:.4e} -> {}",
            points.len(),
            fitted,
            path.display()
        ),
    })
}

// ---------------------------------------------------------------------------
// measure
// ---------------------------------------------------------------------------

pub fn measure_cmd(ctx: &Ctx) -> Result<Outcome> {
    let r = &ctx.resolved;
    ctx.note("sampling tangential frequencies");
    let normal_values = r.potential.clone();
    let map = move |j: kamlab_core::Mode, _nu: &[f64]| -> f64 {
        (j as f64) * (j as f64) + normal_values.get(j)
    };
    let rep = kamlab_core::measure_estimate(
        &r.dioph,
        &r.budget,
        &r.config.audit.gamma_grid,
        r.config.run.n_samples,
        r.config.run.seed,
        &map,
    )?;

    let mut passed = true;
    let mut rows_json = Vec::new();
    let mut csv = String::from(
        "gamma,excluded,fraction,ci_low,ci_high,analytic_truncated,analytic_tail_bound\n",
    );
    for row in &rep.rows {
        let bound = row.analytic_truncated + row.analytic_tail_bound;
        if row.ci_low > bound {
            passed = false;
        }
        let mut m = Map::new();
        m.insert("gamma".into(), num(row.gamma));
        m.insert("excluded".into(), Value::from(row.excluded));
        m.insert("fraction".into(), num(row.fraction));
        m.insert("ci_low".into(), num(row.ci_low));
        m.insert("ci_high".into(), num(row.ci_high));
        m.insert("analytic_truncated".into(), num(row.analytic_truncated));
        m.insert("analytic_tail_bound".into(), num(row.analytic_tail_bound));
        m.insert("within_analytic_bound".into(), Value::Bool(row.ci_low <= bound));
        rows_json.push(Value::Object(m));
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_num(row.gamma),
            row.excluded,
            csv_num(row.fraction),
            csv_num(row.ci_low),
            csv_num(row.ci_high),
            csv_num(row.analytic_truncated),
            csv_num(row.analytic_tail_bound),
        ));
    }

    let mut report = base_report(ctx, "measure");
    report.insert("rows".into(), Value::Array(rows_json));
    report.insert("n_samples".into(), Value::from(rep.n_samples));
    report.insert("seed".into(), Value::from(r.config.run.seed));
    report.insert(
        "resonance_count".into(),
        Value::from(rep.resonance_count as u64),
    );
    report.insert("unit_weight_sum".into(), num(rep.unit_weight_sum));
    report.insert("tail_series".into(), num(rep.tail_series));
    report.insert("worst_t".into(), num(rep.worst_t));
    report.insert(
        "worst_witness".into(),
        rep.worst_witness
            .as_ref()
            .map(signed_vector_json)
            .unwrap_or(Value::Null),
    );
    report.insert("passed".into(), Value::Bool(passed));

    let json_path = write_json(&ctx.out_dir, "measure.json", &Value::Object(report))?;
    write_text(&ctx.out_dir, "measure.csv", &csv)?;
    Ok(Outcome {
        passed,
        summary: format!(
            "{} samples x {} gammas, worst t {:.3e} -> {}",
            rep.n_samples,
            rep.rows.len(),
            rep.worst_t,
            json_path.display()
        ),
    })
}

// ---------------------------------------------------------------------------
// normal-form / verify-torus (shared pipeline)
// ---------------------------------------------------------------------------

struct PipelineRun {
    dc: DcReport,
    seed_stats: Value,
    result: PipelineResult,
}

fn run_pipeline(ctx: &Ctx) -> Result<PipelineRun> {
    let r = &ctx.resolved;
    let cap = r.config.truncation.degree_cap;
    ctx.note("checking the small-divisor condition");
    let dc = verify_dc(&r.omega, &r.dioph, &r.budget);
    ctx.note("assembling the perturbation");
    let d = diagonal_hamiltonian(&r.omega, cap);
    let nls = build_nls(&r.potential, &r.model, cap)?;
    let g0 = nls.sub(&d)?.scaled_re(r.config.nonlinearity.scale);
    let seed_stats = poly_stats_json(&g0, &r.torus.norm_params());
    let opts = RunOptions {
        steps: r.config.run.n_steps,
        floor: EPSILON_FLOOR,
        kam: KamOptions {
            order_cap: r.config.truncation.order_cap,
            smallness_threshold: SMALLNESS_THRESHOLD,
        },
    };
    ctx.note("running the iteration");
    let result = run_kam_verbose(ctx, g0, &opts)?;
    Ok(PipelineRun {
        dc,
        seed_stats,
        result,
    })
}

fn run_kam_verbose(ctx: &Ctx, g0: HamiltonianPoly, opts: &RunOptions) -> Result<PipelineResult> {
    let r = &ctx.resolved;
    let result = kamlab_core::run_kam(g0, &r.omega, &r.torus, &r.schedule, &r.dioph, opts)?;
    if ctx.verbose {
        for row in &result.table {
            eprintln!(
                "kamlab: step {}: eps {:.6e}, theta {:.6e}, |lam| {:.3e}",
                row.n, row.eps_n, row.theta_n, row.lam_n
            );
        }
    }
    Ok(result)
}

fn counterterm_json(result: &PipelineResult) -> Value {
    Value::Array(
        result
            .counterterm
            .mode_set()
            .modes()
            .map(|j| Value::Array(vec![Value::from(j), num(result.counterterm.get(j))]))
            .collect(),
    )
}

fn pipeline_json(ctx: &Ctx, run: &PipelineRun, command: &str) -> Map<String, Value> {
    let mut report = base_report(ctx, command);
    report.insert("dioph".into(), dc_json(&run.dc));
    report.insert("seed_perturbation".into(), run.seed_stats.clone());
    report.insert(
        "status".into(),
        serde_json::to_value(&run.result.status).expect("status serializes"),
    );
    report.insert(
        "convergence".into(),
        convergence_rows_json(&run.result.table),
    );
    report.insert("final_eps".into(), num(run.result.final_state.eps));
    report.insert("final_theta".into(), num(run.result.final_state.theta));
    report.insert("theta0".into(), num(run.result.theta0));
    report.insert(
        "decay_constant".into(),
        run.result.decay_constant.map(num).unwrap_or(Value::Null),
    );
    report.insert(
        "quadratic_constant".into(),
        run.result
            .quadratic_constant
            .map(num)
            .unwrap_or(Value::Null),
    );
    report.insert(
        "min_log_exponent".into(),
        run.result
            .min_log_exponent
            .map(num)
            .unwrap_or(Value::Null),
    );
    report.insert("counterterm".into(), counterterm_json(&run.result));
    report.insert(
        "normal_form".into(),
        poly_stats_json(
            &run.result.normal_form,
            &ctx.resolved.torus.norm_params(),
        ),
    );
    report.insert(
        "run_warnings".into(),
        Value::Array(
            run.result
                .warnings
                .iter()
                .map(|w| Value::String(w.clone()))
                .collect(),
        ),
    );
    report
}

pub fn normal_form_cmd(ctx: &Ctx) -> Result<Outcome> {
    let run = run_pipeline(ctx)?;
    let ok_status = !matches!(run.result.status, RunStatus::DecayViolation { .. });
    let passed = run.dc.ok && ok_status;
    let mut report = pipeline_json(ctx, &run, "normal-form");
    report.insert("passed".into(), Value::Bool(passed));
    let json_path = write_json(&ctx.out_dir, "normal_form.json", &Value::Object(report))?;
    write_text(
        &ctx.out_dir,
        "normal_form.csv",
        &convergence_csv(&run.result.table),
    )?;
    Ok(Outcome {
        passed,
        summary: format!(
            "{:?} after {} steps, final eps {:.3e} -> {}",
            run.result.status,
            run.result.table.len(),
            run.result.final_state.eps,
            json_path.display()
        ),
    })
}

pub fn verify_torus_cmd(ctx: &Ctx) -> Result<Outcome> {
    let r = &ctx.resolved;
    let run = run_pipeline(ctx)?;
    let params = r.schedule.norm_params(run.result.final_state.n)?;
    ctx.note("sampling the invariance residual");
    let residual = torus_residual(
        &run.result.normal_form,
        &r.omega,
        &r.torus,
        &params,
        r.config.tolerances.normal_form_defect,
        r.config.tolerances.residual_samples,
        r.config.run.seed,
    )?;
    let tol = r.config.tolerances.torus_residual;
    let ok_status = !matches!(run.result.status, RunStatus::DecayViolation { .. });
    let passed = run.dc.ok && ok_status && residual <= tol;
    let mut report = pipeline_json(ctx, &run, "verify-torus");
    report.insert("residual".into(), num(residual));
    report.insert("residual_tolerance".into(), num(tol));
    report.insert(
        "residual_samples".into(),
        Value::from(r.config.tolerances.residual_samples as u64),
    );
    report.insert("seed".into(), Value::from(r.config.run.seed));
    report.insert("passed".into(), Value::Bool(passed));
    let json_path = write_json(&ctx.out_dir, "verify_torus.json", &Value::Object(report))?;
    Ok(Outcome {
        passed,
        summary: format!(
            "residual {:.3e} (tolerance {:.1e}) -> {}",
            residual,
            tol,
            json_path.display()
        ),
    })
}

// ---------------------------------------------------------------------------
// trajectory
// ---------------------------------------------------------------------------

pub fn trajectory_cmd(ctx: &Ctx) -> Result<Outcome> {
    let r = &ctx.resolved;
    let tcfg = &r.config.trajectory;
    let mut rng = ChaCha8Rng::seed_from_u64(r.config.run.seed);
    let mut phases = ModeVector::zero(r.mode_set.clone());
    let mut phase_pairs = Vec::new();
    for &j in r.mode_set.tangential() {
        let ph = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
        phases.set(j, ph).expect("tangential mode");
        phase_pairs.push(Value::Array(vec![Value::from(j), num(ph)]));
    }
    let x_grid: Vec<f64> = (0..tcfg.x_points)
        .map(|k| 2.0 * std::f64::consts::PI * k as f64 / tcfg.x_points as f64)
        .collect();
    ctx.note("sampling the quasi-periodic profile");
    let rows = kamlab_core::sample_trajectory(&r.torus, &r.omega, &phases, &tcfg.times, &x_grid);
    let holder =
        kamlab_core::holder_time_exponent(&r.torus, &r.omega, &phases, &x_grid, tcfg.t0, &tcfg.increments);

    let mut csv = String::from("t,x,re,im\n");
    let mut sup = 0.0f64;
    for (ti, row) in rows.iter().enumerate() {
        for (xi, u) in row.iter().enumerate() {
            sup = sup.max(u.norm());
            csv.push_str(&format!(
                "{},{},{},{}\n",
                csv_num(tcfg.times[ti]),
                csv_num(x_grid[xi]),
                csv_num(u.re),
                csv_num(u.im),
            ));
        }
    }

    let mut report = base_report(ctx, "trajectory");
    report.insert("phases".into(), Value::Array(phase_pairs));
    report.insert("seed".into(), Value::from(r.config.run.seed));
    report.insert(
        "times".into(),
        Value::Array(tcfg.times.iter().map(|&t| num(t)).collect()),
    );
    report.insert("x_points".into(), Value::from(tcfg.x_points as u64));
    report.insert("sup_amplitude".into(), num(sup));
    report.insert("holder_time_exponent".into(), num(holder));
    report.insert("passed".into(), Value::Bool(true));

    let json_path = write_json(&ctx.out_dir, "trajectory.json", &Value::Object(report))?;
    write_text(&ctx.out_dir, "trajectory.csv", &csv)?;
    Ok(Outcome {
        passed: true,
        summary: format!(
            "{} x {} grid, time regularity exponent {:.3} -> {}",
            tcfg.times.len(),
            tcfg.x_points,
            holder,
            json_path.display()
        ),
    })
}
