//! `kamlab`: a command-line laboratory around the truncated normal-form
//! pipeline.  Every command reads one JSON configuration (defaults apply for
//! every omitted field), writes byte-deterministic reports into the output
//! directory, and exits 0 exactly when all of its assertions passed.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process;

use clap::{Parser, Subcommand};
use serde_json::{Map, Value};

#[derive(Parser)]
#[command(
    name = "kamlab",
    version,
    about = "Truncated normal-form laboratory for 1d NLS invariant tori"
)]
struct Cli {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the experiment seed (echoed in reports).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads; falls back to KAMLAB_WORKERS, then all cores.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// Output directory for reports; defaults to the configured one.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Print progress notes to stderr.
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Assemble the truncated Hamiltonian and report its term statistics.
    #[command(name = "build-nls")]
    BuildNls,
    /// Check the small-divisor bound over the whole resonance budget.
    #[command(name = "dioph-audit")]
    DiophAudit,
    /// Measure the divisor-growth supremum across the weight-increment grid.
    #[command(name = "k0-audit")]
    K0Audit,
    /// Monte Carlo estimate of the excluded frequency measure.
    #[command(name = "measure")]
    Measure,
    /// Run the quadratic iteration and report the convergence table.
    #[command(name = "normal-form")]
    NormalForm,
    /// Run the iteration, then sample the invariance residual of the torus.
    #[command(name = "verify-torus")]
    VerifyTorus,
    /// Sample the quasi-periodic profile on a space-time grid.
    #[command(name = "trajectory")]
    Trajectory,
}

impl Cmd {
    fn name(self) -> &'static str {
        match self {
            Cmd::BuildNls => "build-nls",
            Cmd::DiophAudit => "dioph-audit",
            Cmd::K0Audit => "k0-audit",
            Cmd::Measure => "measure",
            Cmd::NormalForm => "normal-form",
            Cmd::VerifyTorus => "verify-torus",
            Cmd::Trajectory => "trajectory",
        }
    }

    fn report_file(self) -> String {
        format!("{}.json", self.name().replace('-', "_"))
    }
}

fn main() {
    let cli = Cli::parse();
    process::exit(run(cli));
}

fn run(cli: Cli) -> i32 {
    let workers = cli.workers.or_else(|| {
        std::env::var("KAMLAB_WORKERS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    if let Some(n) = workers {
        if n > 0 {
            // A global pool may already exist (e.g. in-process tests); the
            // explicit request only matters for the first initialization.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }

    let mut resolved = match config::load_config(cli.config.as_deref()) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("kamlab: configuration error: {e:#}");
            return 2;
        }
    };
    if let Some(seed) = cli.seed {
        resolved.config.run.seed = seed;
    }
    for w in &resolved.warnings {
        eprintln!("kamlab: warning: {w}");
    }

    // --out redirects where files land without entering the report body, so
    // the same experiment produces identical bytes wherever it is written.
    let out_dir = cli
        .out
        .unwrap_or_else(|| PathBuf::from(&resolved.config.output.dir));
    let ctx = commands::Ctx {
        resolved,
        out_dir,
        verbose: cli.verbose,
    };

    let name = cli.cmd.name();
    let outcome = match cli.cmd {
        Cmd::BuildNls => commands::build_nls_cmd(&ctx),
        Cmd::DiophAudit => commands::dioph_audit_cmd(&ctx),
        Cmd::K0Audit => commands::k0_audit_cmd(&ctx),
        Cmd::Measure => commands::measure_cmd(&ctx),
        Cmd::NormalForm => commands::normal_form_cmd(&ctx),
        Cmd::VerifyTorus => commands::verify_torus_cmd(&ctx),
        Cmd::Trajectory => commands::trajectory_cmd(&ctx),
    };

    match outcome {
        Ok(o) => {
            println!("{name}: {} {}", if o.passed { "PASS" } else { "FAIL" }, o.summary);
            if o.passed {
                0
            } else {
                1
            }
        }
        Err(e) => {
            let mut report = Map::new();
            report.insert("command".into(), Value::String(name.into()));
            report.insert(
                "config".into(),
                serde_json::to_value(&ctx.resolved.config).expect("config serializes"),
            );
            let mut err = Map::new();
            err.insert("kind".into(), Value::String(error_kind(&e)));
            err.insert("message".into(), Value::String(format!("{e:#}")));
            report.insert("error".into(), Value::Object(err));
            report.insert("passed".into(), Value::Bool(false));
            if let Err(io) = report::write_json(
                &ctx.out_dir,
                &cli.cmd.report_file(),
                &Value::Object(report),
            ) {
                eprintln!("kamlab: {name}: could not write the error report: {io:#}");
            }
            eprintln!("kamlab: {name}: error: {e:#}");
            1
        }
    }
}

/// Names the first library error in the chain by its variant (e.g.
/// "NotNormalForm"); anything else is a plain "cli" failure.
fn error_kind(e: &anyhow::Error) -> String {
    for cause in e.chain() {
        if let Some(ke) = cause.downcast_ref::<kamlab_core::Error>() {
            let dbg = format!("{ke:?}");
            let name: String = dbg
                .chars()
                .take_while(|c| c.is_ascii_alphanumeric())
                .collect();
            if !name.is_empty() {
                return name;
            }
        }
    }
    "cli".into()
}
