//! Comparison tables: CSV with a fixed header plus a plain-text rendering.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::eval::Evaluation;
use crate::metrics::METRIC_NAMES;

pub const REPORT_HEADER: &str =
    "method,max_sens,avg_sens,lipschitz,faith_corr,faith_est,complexity,sparseness,clean_acc,robust_acc";

/// One method's row. Missing values are written as empty fields.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    /// Metric means in [`METRIC_NAMES`] order.
    pub metrics: [Option<f64>; 7],
    pub clean_acc: Option<f64>,
    pub robust_acc: Option<f64>,
}

impl ReportRow {
    pub fn from_evaluation(method: &str, eval: &Evaluation) -> Self {
        let mut metrics = [None; 7];
        for (slot, name) in METRIC_NAMES.iter().enumerate() {
            metrics[slot] = eval.report.mean(name);
        }
        ReportRow {
            method: method.to_string(),
            metrics,
            clean_acc: Some(eval.clean_acc),
            robust_acc: eval.robust_acc,
        }
    }

    fn cells(&self) -> Vec<Option<f64>> {
        let mut v = self.metrics.to_vec();
        v.push(self.clean_acc);
        v.push(self.robust_acc);
        v
    }
}

/// C `printf("%.6g")` formatting.
pub fn format_g6(v: f64) -> String {
    const P: i32 = 6;
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..P).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        strip_zeros(&format!("{:.*}", (P - 1 - exp) as usize, v))
    }
}

fn strip_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(format_g6).unwrap_or_default()
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("report CSV: {e}"))
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let write = |w: &mut csv::Writer<Vec<u8>>| -> csv::Result<()> {
        w.write_record(REPORT_HEADER.split(','))?;
        for r in rows {
            let mut record = vec![r.method.clone()];
            record.extend(r.cells().into_iter().map(cell));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    };
    write(&mut w).expect("writing to memory cannot fail");
    String::from_utf8(w.into_inner().expect("flushed")).expect("UTF-8 fields")
}

/// Column-aligned plain-text table of the same values.
pub fn render_table(rows: &[ReportRow]) -> String {
    let header: Vec<String> = REPORT_HEADER.split(',').map(String::from).collect();
    let mut table = vec![header];
    for r in rows {
        let mut line = vec![r.method.clone()];
        line.extend(r.cells().into_iter().map(|v| v.map(format_g6).unwrap_or_else(|| "-".into())));
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, line) in table.iter().enumerate() {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, &w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_error)?;
    if header.iter().collect::<Vec<_>>().join(",") != REPORT_HEADER {
        return Err(Error::InvalidArgument(format!(
            "report header mismatch: expected {REPORT_HEADER:?}, found {header:?}"
        )));
    }
    reader
        .records()
        .map(|record| {
            let f = record.map_err(csv_error)?;
            let num = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::InvalidArgument(format!("bad number {s:?} in report")))
                }
            };
            let mut metrics = [None; 7];
            for (slot, m) in metrics.iter_mut().enumerate() {
                *m = num(&f[slot + 1])?;
            }
            Ok(ReportRow {
                method: f[0].to_string(),
                metrics,
                clean_acc: num(&f[8])?,
                robust_acc: num(&f[9])?,
            })
        })
        .collect()
}

/// Writes `path` (CSV) and the same path with a `.txt` extension (table).
pub fn emit_report(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, report_csv(rows)).map_err(|e| Error::io(path, e))?;
    let txt = path.with_extension("txt");
    fs::write(&txt, render_table(rows)).map_err(|e| Error::io(&txt, e))
}
