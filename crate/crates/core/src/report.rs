//! JSON and CSV emission with fixed significant digits.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Result, SimError};
use crate::pipeline::SimReport;

pub const SIGNIFICANT_DIGITS: usize = 6;

/// Rounds to [`SIGNIFICANT_DIGITS`] significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return if x.is_finite() { 0.0 } else { x };
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x).parse().expect("formatted float")
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let r = round_sig(n.as_f64().expect("f64 number"));
            *v = serde_json::Number::from_f64(r).map(Value::Number).unwrap_or(Value::Null);
        }
        Value::Array(a) => a.iter_mut().for_each(round_value),
        Value::Object(o) => o.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Serializes any value as pretty JSON with rounded floats.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Rounds every float and recomputes the energy total from the rounded parts.
pub fn normalize(report: &SimReport) -> Result<SimReport> {
    let mut r: SimReport = serde_json::from_str(&to_json(report)?)?;
    let e = &mut r.energy;
    e.total_pj = round_sig(e.vmm + e.write + e.adc + e.dac + e.transfer + e.scheduler + e.peripheral);
    Ok(r)
}

pub fn emit_report(report: &SimReport) -> Result<String> {
    to_json(&normalize(report)?)
}

pub fn parse_report(text: &str) -> Result<SimReport> {
    Ok(serde_json::from_str(text)?)
}

/// Writes through a temporary file so a failure never leaves a partial report.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let ctx = |e: std::io::Error| std::io::Error::new(e.kind(), format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(ctx)?;
    tmp.write_all(contents.as_bytes()).map_err(ctx)?;
    tmp.persist(path).map_err(|e| ctx(e.error))?;
    Ok(())
}

/// CSV text with a header row; floats rounded like the JSON output.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (i, row) in rows.iter().enumerate() {
        let mut v = serde_json::to_value(row)?;
        round_value(&mut v);
        let obj = v
            .as_object()
            .ok_or_else(|| SimError::Config("csv rows must be flat records".into()))?;
        if i == 0 {
            w.write_record(obj.keys()).map_err(csv_err)?;
        }
        let cells: Vec<String> = obj
            .values()
            .map(|c| match c {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect();
        w.write_record(&cells).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> SimError {
    SimError::Io(e.into())
}
