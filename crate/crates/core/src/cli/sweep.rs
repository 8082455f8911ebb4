//! One-parameter sweeps reporting mPrec and mIoU on the validation split.

use std::fmt::Write as _;

use log::info;

use super::config::RunConfig;
use super::infer::evaluate;
use super::train::{train, Dataset};
use crate::error::{Error, Result};

pub const SWEEPABLE: [&str; 6] = ["beta", "alpha", "groups", "sigma", "bidirectional", "split"];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    /// Means over seeds.
    pub mprec: f64,
    pub miou: f64,
}

pub fn run_sweep(base: &RunConfig, data: &Dataset, param: &str, values: &[String], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if !SWEEPABLE.contains(&param) {
        return Err(Error::Config(format!(
            "`{param}` is not sweepable (choose from {})",
            SWEEPABLE.join(", ")
        )));
    }
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one value and one seed".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Data("sweeps are scored on the validation split, which is empty".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        cfg.set(param, value.trim())?;
        cfg.val_every = 0;
        cfg.validate()?;
        let (mut mprec, mut miou) = (0.0, 0.0);
        for &seed in seeds {
            cfg.seed = seed;
            let outcome = train(&cfg, data, false)?;
            let report = evaluate(&outcome.params, &data.val, &cfg)?;
            mprec += report.instance.mprec;
            miou += report.semantic.miou;
        }
        let n = seeds.len() as f64;
        let row = SweepRow {
            value: value.trim().to_string(),
            mprec: mprec / n,
            miou: miou / n,
        };
        info!("{param} = {}: mPrec {:.4} mIoU {:.4}", row.value, row.mprec, row.miou);
        rows.push(row);
    }
    let spread = |f: fn(&SweepRow) -> f64| {
        let v: Vec<f64> = rows.iter().map(f).collect();
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    info!(
        "{param} sweep spread: mPrec {:.4}, mIoU {:.4}",
        spread(|r| r.mprec),
        spread(|r| r.miou)
    );
    Ok(rows)
}

pub fn table_tsv(rows: &[SweepRow]) -> String {
    let mut s = String::from("value\tmPrec\tmIoU\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{:.6}\t{:.6}", r.value, r.mprec, r.miou);
    }
    s
}

/// Whitespace-separated columns with a commented header, one row per value.
pub fn series(param: &str, rows: &[SweepRow]) -> String {
    let mut s = format!("# {param} mPrec mIoU\n");
    for r in rows {
        let _ = writeln!(s, "{} {:.6} {:.6}", r.value, r.mprec, r.miou);
    }
    s
}

/// Parses a table written by [`table_tsv`].
pub fn parse_table(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("value\tmPrec\tmIoU") {
        return Err(Error::Data("sweep table has an unexpected header".into()));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let num = |t: &str| t.parse::<f64>().map_err(|_| Error::Data(format!("bad sweep row `{l}`")));
            match f.as_slice() {
                [v, p, m] => Ok(SweepRow {
                    value: v.to_string(),
                    mprec: num(p)?,
                    miou: num(m)?,
                }),
                _ => Err(Error::Data(format!("bad sweep row `{l}`"))),
            }
        })
        .collect()
}
