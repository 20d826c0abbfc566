//! Lambda sweeps: one NsLoss model per λ, scored on a fixed test slice.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Regime, Splits};
use crate::harness::eval::evaluate;
use crate::harness::report::format_g6;
use crate::harness::train::{initial_model, train_model};
use crate::metrics::{MetricSelection, FAITH_EST, MAX_SENS, SPARSENESS};
use crate::nsloss::NsConfig;

pub const SWEEP_HEADER: &str = "lambda,max_sens,faith_est,sparseness,accuracy";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub max_sens: Option<f64>,
    pub faith_est: Option<f64>,
    pub sparseness: Option<f64>,
    pub accuracy: f64,
}

/// Trains the base config once per λ in the nsloss regime, each run starting
/// from the same initial model.
pub fn sweep_lambda(base: &ExperimentConfig, splits: &Splits, lambdas: &[f64]) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::Config("lambda sweep needs at least one value".into()));
    }
    let ns = base.ns_config()?.clone();
    let start = initial_model(base, &splits.train)?;
    lambdas
        .iter()
        .map(|&lambda| {
            let mut cfg = base.clone();
            cfg.regime = Regime::Nsloss;
            cfg.ns = Some(NsConfig { lambda, ..ns.clone() });
            cfg.validate()?;
            let outcome = train_model(&cfg, splits, start.clone())?;
            let eval = evaluate(&cfg, splits, &outcome.model, "nsloss", MetricSelection::SNAPSHOT)?;
            Ok(SweepRow {
                lambda,
                max_sens: eval.report.mean(MAX_SENS),
                faith_est: eval.report.mean(FAITH_EST),
                sparseness: eval.report.mean(SPARSENESS),
                accuracy: eval.clean_acc,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let cell = |v: Option<f64>| v.map(format_g6).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let write = |w: &mut csv::Writer<Vec<u8>>| -> csv::Result<()> {
        w.write_record(SWEEP_HEADER.split(','))?;
        for r in rows {
            w.write_record([
                format_g6(r.lambda),
                cell(r.max_sens),
                cell(r.faith_est),
                cell(r.sparseness),
                format_g6(r.accuracy),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    write(&mut w).expect("writing to memory cannot fail");
    String::from_utf8(w.into_inner().expect("flushed")).expect("UTF-8 fields")
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let bad = |m: String| Error::InvalidArgument(format!("sweep table: {m}"));
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != SWEEP_HEADER {
        return Err(bad(format!("header must be {SWEEP_HEADER:?}")));
    }
    reader
        .records()
        .map(|record| {
            let f = record.map_err(|e| bad(e.to_string()))?;
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            Ok(SweepRow {
                lambda: num(&f[0])?,
                max_sens: opt(&f[1])?,
                faith_est: opt(&f[2])?,
                sparseness: opt(&f[3])?,
                accuracy: num(&f[4])?,
            })
        })
        .collect()
}

pub fn write_sweep(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, sweep_csv(rows)).map_err(|e| Error::io(path, e))
}
