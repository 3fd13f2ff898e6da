//! Per-figure CSV tables pivoted from sweep records.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::sweep::{read_records, EvalRecord};
use crate::error::{Error, Result};

/// Rows keyed by numeric axis values, one column per series.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub axes: Vec<&'static str>,
    pub series: Vec<String>,
    pub rows: Vec<(Vec<f64>, Vec<Option<f64>>)>,
}

impl Table {
    pub fn pivot<'a>(
        records: impl IntoIterator<Item = &'a EvalRecord>,
        axes: Vec<&'static str>,
        key: impl Fn(&EvalRecord) -> Vec<f64>,
        series: impl Fn(&EvalRecord) -> String,
        value: impl Fn(&EvalRecord) -> f64,
    ) -> Self {
        let mut cells: BTreeMap<Vec<u64>, (Vec<f64>, BTreeMap<String, f64>)> = BTreeMap::new();
        let mut names = BTreeSet::new();
        for r in records {
            let k = key(r);
            // Order keys numerically via an order-preserving bit map.
            let ord: Vec<u64> = k.iter().map(|x| sortable(*x)).collect();
            let s = series(r);
            names.insert(s.clone());
            cells.entry(ord).or_insert_with(|| (k, BTreeMap::new())).1.insert(s, value(r));
        }
        let series: Vec<String> = names.into_iter().collect();
        let rows = cells.into_values().map(|(k, m)| (k, series.iter().map(|s| m.get(s).copied()).collect())).collect();
        Self { axes, series, rows }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header: Vec<String> = self.axes.iter().map(|s| s.to_string()).chain(self.series.iter().cloned()).collect();
        writeln!(w, "{}", header.join(","))?;
        for (k, vals) in &self.rows {
            let cols: Vec<String> =
                k.iter().map(f64::to_string).chain(vals.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default())).collect();
            writeln!(w, "{}", cols.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn sortable(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

const REFERENCE_SCENARIO: &str = "urban";

fn unmasked(r: &EvalRecord) -> bool {
    !r.method.contains('/')
}

/// Figure tables from a set of records, by file name.
pub fn figure_tables(records: &[EvalRecord], reference_spacing: usize) -> Vec<(&'static str, Table)> {
    let main = |r: &&EvalRecord| r.scenario == REFERENCE_SCENARIO && unmasked(r);
    let snr = |r: &EvalRecord| vec![r.snr_db];
    let series = |r: &EvalRecord| r.series();
    let mut out = Vec::new();
    let at_spacing: Vec<&EvalRecord> = records.iter().filter(main).filter(|r| r.spacing == reference_spacing).collect();
    out.push(("nmse_vs_snr.csv", Table::pivot(at_spacing.iter().copied(), vec!["snr_db"], snr, series, |r| r.nmse_db)));
    out.push(("cosine_vs_snr.csv", Table::pivot(at_spacing.iter().copied(), vec!["snr_db"], snr, series, |r| r.cosine)));
    out.push((
        "nmse_vs_spacing.csv",
        Table::pivot(records.iter().filter(main), vec!["snr_db", "spacing"], |r| vec![r.snr_db, r.spacing as f64], series, |r| r.nmse_db),
    ));
    let ablation = records
        .iter()
        .filter(|r| r.scenario == REFERENCE_SCENARIO && r.spacing == reference_spacing && r.method.starts_with("flow"));
    out.push(("ablation.csv", Table::pivot(ablation, vec!["snr_db"], snr, series, |r| r.nmse_db)));
    let ood: Vec<&EvalRecord> = records.iter().filter(|r| r.scenario != REFERENCE_SCENARIO && unmasked(r)).collect();
    out.push(("ood_nmse.csv", Table::pivot(ood.iter().copied(), vec!["snr_db", "spacing"], |r| vec![r.snr_db, r.spacing as f64], series, |r| r.nmse_db)));
    out.push(("ood_cosine.csv", Table::pivot(ood.iter().copied(), vec!["snr_db", "spacing"], |r| vec![r.snr_db, r.spacing as f64], series, |r| r.cosine)));
    out
}

/// Reads every `*.csv` results file in `dir` (skipping earlier reports)
/// and writes the figure tables to `dir/report/`.
pub fn report(dir: &Path, reference_spacing: usize) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    let mut records = Vec::new();
    for f in &files {
        records.extend(read_records(f)?);
    }
    if records.is_empty() {
        return Err(Error::Format(format!("no result records in {}", dir.display())));
    }
    let out_dir = dir.join("report");
    std::fs::create_dir_all(&out_dir)?;
    let mut written = Vec::new();
    for (name, table) in figure_tables(&records, reference_spacing) {
        if table.rows.is_empty() {
            continue;
        }
        let p = out_dir.join(name);
        table.write(&p)?;
        written.push(p);
    }
    Ok(written)
}
