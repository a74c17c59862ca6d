//! CSV writing with fixed float formatting.

use std::io::Write;
use std::path::Path;

use staleracer_core::sim::{Trace, UpdateRecord};

/// Formats to 9 significant digits, dropping trailing zeros; scientific
/// notation outside `[1e-5, 1e9)`.
pub fn g9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let exp = x.abs().log10().floor() as i32;
    let s = if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        // rounding can carry into a new digit (9.99999999995 → 10.0000000)
        trim_zeros(s)
    } else {
        let s = format!("{x:.8e}");
        let (mantissa, exponent) = s.split_once('e').expect("scientific format");
        format!("{}e{exponent}", trim_zeros(mantissa.to_string()))
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map(g9).unwrap_or_default()
}

/// Writer that goes to a file, or stdout when no path is given.
pub fn csv_writer(out: Option<&Path>) -> anyhow::Result<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout()),
    };
    Ok(csv::Writer::from_writer(sink))
}

pub const TRACE_HEADER: [&str; 7] =
    ["j", "wallclock", "loss", "grad_norm_sq", "staleness_mean", "staleness_max", "contributors"];

pub fn trace_row(r: &UpdateRecord) -> Vec<String> {
    vec![
        r.j.to_string(),
        g9(r.wallclock),
        opt(r.loss),
        opt(r.grad_norm_sq),
        g9(r.staleness_mean()),
        r.staleness_max().to_string(),
        r.contributors.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "),
    ]
}

pub fn write_trace<W: Write>(w: &mut csv::Writer<W>, trace: &Trace) -> anyhow::Result<()> {
    w.write_record(TRACE_HEADER)?;
    for r in &trace.records {
        w.write_record(trace_row(r))?;
    }
    w.flush()?;
    Ok(())
}
