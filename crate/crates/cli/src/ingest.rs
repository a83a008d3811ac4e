//! CSV datasets. Schemas (header row required, one unit per row):
//!
//! - radon: `y,x,group,u`
//! - dns: `date,y_tau<τ>...` with one column per maturity, in months
//! - m5: `item,department,y_s1..y_sS`
//! - conjugate: `group,y`
//!
//! Group ids are 1-based and dense. Errors carry the 1-based file line.

use std::io::{Read, Write};
use std::path::Path;

use asmc_core::models::{ConjugateData, Dataset, DnsData, M5Data, ModelKind, RadonData};

use crate::CliError;

fn data_err(line: u64, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("line {line}: {msg}"))
}

struct Table {
    header: Vec<String>,
    /// `(line, cells)` per data row.
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table<R: Read>(src: R) -> Result<Table, CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(src);
    let header: Vec<String> =
        rdr.headers().map_err(|e| data_err(1, e))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Data(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(data_err(line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    if rows.is_empty() {
        return Err(CliError::Data("no data rows".into()));
    }
    Ok(Table { header, rows })
}

fn expect_header(t: &Table, fixed: &[&str]) -> Result<(), CliError> {
    if t.header.len() < fixed.len() || t.header[..fixed.len()] != *fixed {
        return Err(data_err(1, format!("header must start with {}, found {}", fixed.join(","), t.header.join(","))));
    }
    Ok(())
}

fn cell<'a>(t: &'a Table, line: u64, row: &'a [String], col: usize) -> Result<&'a str, CliError> {
    let v = row[col].as_str();
    if v.is_empty() {
        return Err(data_err(line, format!("empty field {}", t.header[col])));
    }
    Ok(v)
}

fn num(t: &Table, line: u64, row: &[String], col: usize) -> Result<f64, CliError> {
    let v = cell(t, line, row, col)?;
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(data_err(line, format!("field {} is not a finite number: '{v}'", t.header[col]))),
    }
}

fn group_id(t: &Table, line: u64, row: &[String], col: usize) -> Result<usize, CliError> {
    let v = cell(t, line, row, col)?;
    match v.parse::<usize>() {
        Ok(g) if g >= 1 => Ok(g),
        _ => Err(data_err(line, format!("field {} must be a positive integer id, got '{v}'", t.header[col]))),
    }
}

/// Group ids must cover `1..=max` with no gaps.
fn check_dense(ids: &[(u64, usize)]) -> Result<(), CliError> {
    let max = ids.iter().map(|v| v.1).max().unwrap_or(0);
    let mut seen = vec![false; max];
    for &(_, g) in ids {
        seen[g - 1] = true;
    }
    if let Some(g) = seen.iter().position(|s| !s) {
        return Err(CliError::Data(format!("group ids are not dense: no rows for group {} (max id {max})", g + 1)));
    }
    Ok(())
}

fn columns_with_prefix(t: &Table, from: usize, prefix: &str) -> Result<Vec<f64>, CliError> {
    let cols = &t.header[from..];
    if cols.is_empty() {
        return Err(data_err(1, format!("expected at least one {prefix}* column")));
    }
    cols.iter()
        .map(|h| {
            h.strip_prefix(prefix)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| data_err(1, format!("column '{h}' does not match {prefix}<number>")))
        })
        .collect()
}

pub fn ingest_csv(kind: ModelKind, path: &Path) -> Result<Dataset, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    ingest_reader(kind, f).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn ingest_reader<R: Read>(kind: ModelKind, src: R) -> Result<Dataset, CliError> {
    let t = read_table(src)?;
    let core = |e: asmc_core::Error| CliError::Data(e.to_string());
    match kind {
        ModelKind::Radon => {
            expect_header(&t, &["y", "x", "group", "u"])?;
            if t.header.len() != 4 {
                return Err(data_err(1, "radon data has exactly the columns y,x,group,u"));
            }
            let mut rows = Vec::with_capacity(t.rows.len());
            let mut ids = Vec::new();
            for (line, r) in &t.rows {
                let g = group_id(&t, *line, r, 2)?;
                ids.push((*line, g));
                rows.push((num(&t, *line, r, 0)?, num(&t, *line, r, 1)?, g, num(&t, *line, r, 3)?));
            }
            check_dense(&ids)?;
            // Report the first line whose u disagrees with its group.
            let mut first_u = std::collections::HashMap::new();
            for ((line, _), row) in t.rows.iter().zip(&rows) {
                if let Some(&u) = first_u.get(&row.2) {
                    if u != row.3 {
                        return Err(data_err(*line, format!("u differs within group {}", row.2)));
                    }
                } else {
                    first_u.insert(row.2, row.3);
                }
            }
            RadonData::from_rows(&rows).map(Dataset::Radon).map_err(core)
        }
        ModelKind::Dns => {
            expect_header(&t, &["date"])?;
            let maturities = columns_with_prefix(&t, 1, "y_tau")?;
            let mut y = Vec::with_capacity(t.rows.len());
            for (line, r) in &t.rows {
                cell(&t, *line, r, 0)?;
                y.push((1..t.header.len()).map(|c| num(&t, *line, r, c)).collect::<Result<Vec<_>, _>>()?);
            }
            Ok(Dataset::Dns(DnsData { maturities, y }))
        }
        ModelKind::M5 => {
            expect_header(&t, &["item", "department"])?;
            let stores = columns_with_prefix(&t, 2, "y_s")?;
            if stores.iter().enumerate().any(|(i, &s)| s != (i + 1) as f64) {
                return Err(data_err(1, "store columns must be y_s1..y_sS in order"));
            }
            let mut rows = Vec::with_capacity(t.rows.len());
            let mut ids = Vec::new();
            for (line, r) in &t.rows {
                cell(&t, *line, r, 0)?;
                let g = group_id(&t, *line, r, 1)?;
                ids.push((*line, g));
                rows.push((g, (2..t.header.len()).map(|c| num(&t, *line, r, c)).collect::<Result<Vec<_>, _>>()?));
            }
            check_dense(&ids)?;
            M5Data::from_rows(rows).map(Dataset::M5).map_err(core)
        }
        ModelKind::Conjugate => {
            expect_header(&t, &["group", "y"])?;
            if t.header.len() != 2 {
                return Err(data_err(1, "conjugate data has exactly the columns group,y"));
            }
            let mut rows = Vec::with_capacity(t.rows.len());
            let mut ids = Vec::new();
            for (line, r) in &t.rows {
                let g = group_id(&t, *line, r, 0)?;
                ids.push((*line, g));
                rows.push((g, num(&t, *line, r, 1)?));
            }
            check_dense(&ids)?;
            ConjugateData::from_rows(&rows).map(Dataset::Conjugate).map_err(core)
        }
    }
}

fn fmt_maturity(tau: f64) -> String {
    if tau.fract() == 0.0 {
        format!("{}", tau as i64)
    } else {
        format!("{tau}")
    }
}

/// Writes `data` in the schema [`ingest_reader`] reads back.
pub fn write_csv<W: Write>(data: &Dataset, dst: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(dst);
    match data {
        Dataset::Radon(d) => {
            w.write_record(["y", "x", "group", "u"])?;
            for g in 0..d.y.len() {
                for (y, x) in d.y[g].iter().zip(&d.x[g]) {
                    w.write_record([y.to_string(), x.to_string(), (g + 1).to_string(), d.u[g].to_string()])?;
                }
            }
        }
        Dataset::Dns(d) => {
            let mut h = vec!["date".to_string()];
            h.extend(d.maturities.iter().map(|&t| format!("y_tau{}", fmt_maturity(t))));
            w.write_record(&h)?;
            for (t, y) in d.y.iter().enumerate() {
                let mut r = vec![(t + 1).to_string()];
                r.extend(y.iter().map(f64::to_string));
                w.write_record(&r)?;
            }
        }
        Dataset::M5(d) => {
            let s = d.y.first().and_then(|g| g.first()).map_or(0, Vec::len);
            let mut h = vec!["item".to_string(), "department".to_string()];
            h.extend((1..=s).map(|k| format!("y_s{k}")));
            w.write_record(&h)?;
            let mut item = 0;
            for (g, items) in d.y.iter().enumerate() {
                for y in items {
                    item += 1;
                    let mut r = vec![item.to_string(), (g + 1).to_string()];
                    r.extend(y.iter().map(f64::to_string));
                    w.write_record(&r)?;
                }
            }
        }
        Dataset::Conjugate(d) => {
            w.write_record(["group", "y"])?;
            for (g, ys) in d.y.iter().enumerate() {
                for y in ys {
                    w.write_record([(g + 1).to_string(), y.to_string()])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
