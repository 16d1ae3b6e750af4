//! Byte-deterministic report emission.
//!
//! JSON documents print with sorted object keys and floats rendered by a
//! printf-style `%.17g` formatter (17 significant digits always round-trip an
//! `f64`), so a fixed report tree always serializes to identical bytes.  CSV
//! cells use Rust's shortest scientific notation, which is likewise a pure
//! function of the value.  Non-finite floats are encoded as the strings
//! `"inf"`, `"-inf"`, `"nan"` in JSON (the format has no literal for them)
//! and as `inf`/`NaN` tokens in CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{Map, Value};

use kamlab_core::ConvergenceRow;

/// Exact header of every convergence table.
pub const CONVERGENCE_HEADER: &str = "n,r_n,p_n,eps_n,theta_n,lam_n,min_div";

/// printf-style `%.17g`: positional notation for decimal exponents in
/// `[-4, 17)`, scientific otherwise, trailing zeros stripped.
pub fn fmt_g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x < 0.0 { "-inf".into() } else { "inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    // 17 significant digits; the exponent is read off the rounded form so a
    // carry (9.99...e3 -> 1e4) lands in the right branch, as %g prescribes.
    let sci = format!("{:.16e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("{:e} always has an exponent");
    let exp: i32 = exp.parse().expect("decimal exponent");
    if (-4..17).contains(&exp) {
        let prec = (16 - exp).max(0) as usize;
        strip_zeros(format!("{x:.prec$}"))
    } else {
        let m = strip_zeros(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn strip_zeros(mut s: String) -> String {
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

/// JSON value for a float; non-finite values become strings.
pub fn num(x: f64) -> Value {
    match serde_json::Number::from_f64(x) {
        Some(n) => Value::Number(n),
        None => Value::String(fmt_g17(x)),
    }
}

/// CSV cell for a float (shortest scientific notation, `inf` for infinities).
pub fn csv_num(x: f64) -> String {
    format!("{x:e}")
}

fn escape_into(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

fn render_into(v: &Value, indent: usize, out: &mut String) {
    const STEP: &str = "  ";
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                let _ = write!(out, "{i}");
            } else if let Some(u) = n.as_u64() {
                let _ = write!(out, "{u}");
            } else {
                out.push_str(&fmt_g17(n.as_f64().expect("numeric value")));
            }
        }
        Value::String(s) => escape_into(s, out),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('\n');
                out.push_str(&STEP.repeat(indent + 1));
                render_into(item, indent + 1, out);
            }
            out.push('\n');
            out.push_str(&STEP.repeat(indent));
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push('{');
            // serde_json's map is a BTreeMap, so iteration is key-sorted.
            for (i, (k, item)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('\n');
                out.push_str(&STEP.repeat(indent + 1));
                escape_into(k, out);
                out.push_str(": ");
                render_into(item, indent + 1, out);
            }
            out.push('\n');
            out.push_str(&STEP.repeat(indent));
            out.push('}');
        }
    }
}

/// Canonical JSON text: sorted keys, `%.17g` floats, two-space indent,
/// trailing newline.
pub fn render_json(v: &Value) -> String {
    let mut out = String::new();
    render_into(v, 0, &mut out);
    out.push('\n');
    out
}

pub fn write_json(dir: &Path, name: &str, v: &Value) -> Result<PathBuf> {
    write_text(dir, name, &render_json(v))
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Convergence table in the fixed CSV schema.
pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut out = String::from(CONVERGENCE_HEADER);
    out.push('\n');
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.n,
            csv_num(row.r_n),
            csv_num(row.p_n),
            csv_num(row.eps_n),
            csv_num(row.theta_n),
            csv_num(row.lam_n),
            csv_num(row.min_div),
        );
    }
    out
}

/// Convergence table as a JSON array (non-finite divisors become strings).
pub fn convergence_rows_json(rows: &[ConvergenceRow]) -> Value {
    Value::Array(
        rows.iter()
            .map(|row| {
                let mut m = Map::new();
                m.insert("n".into(), Value::from(row.n as u64));
                m.insert("r_n".into(), num(row.r_n));
                m.insert("p_n".into(), num(row.p_n));
                m.insert("eps_n".into(), num(row.eps_n));
                m.insert("theta_n".into(), num(row.theta_n));
                m.insert("lam_n".into(), num(row.lam_n));
                m.insert("min_div".into(), num(row.min_div));
                Value::Object(m)
            })
            .collect(),
    )
}
