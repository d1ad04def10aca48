use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use tempfile::NamedTempFile;

use evgust::metrics::PredictionWithUQ;
use evgust::{Error, Result};

/// Writes through a temp file in the target directory and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    write_atomic(path, &buf)
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let buf = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &buf)
}

pub fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

/// Shortest text that parses back to the same bits.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Percent label for a confidence level, `0.95 -> "95"`.
pub fn level_label(level: f64) -> String {
    let s = format!("{:.4}", level * 100.0);
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Inverse of [`level_label`], shifting the decimal point in text so that
/// `"99.9"` parses to the same bits as `0.999`.
pub fn level_from_label(label: &str) -> Option<f64> {
    let (int, frac) = label.split_once('.').unwrap_or((label, ""));
    if int.is_empty() || int.len() > 2 || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    format!("0.{int:0>2}{frac}").parse().ok()
}

pub const UQ_COLUMNS: [&str; 4] = ["mean", "aleatoric_sd", "epistemic_sd", "total_sd"];

/// `mean … total_sd, lower_<L>, upper_<L> …, flagged`.
pub fn uq_header(levels: &[f64]) -> Vec<String> {
    let mut h = header(&UQ_COLUMNS);
    for &l in levels {
        let tag = level_label(l);
        h.push(format!("lower_{tag}"));
        h.push(format!("upper_{tag}"));
    }
    h.push("flagged".into());
    h
}

pub fn uq_fields(p: &PredictionWithUQ) -> Vec<String> {
    let mut f = vec![num(p.mean), num(p.aleatoric_sd), num(p.epistemic_sd), num(p.total_sd)];
    for pi in &p.intervals {
        f.push(num(pi.lower));
        f.push(num(pi.upper));
    }
    f.push(if p.flagged { "1" } else { "0" }.into());
    f
}

/// Header of a CSV file, with name → index lookup.
pub struct Table {
    pub index: HashMap<String, usize>,
    pub names: Vec<String>,
    pub rows: Vec<csv::StringRecord>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let names: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { index, names, rows })
    }

    pub fn require(&self, col: &str, what: &str) -> Result<usize> {
        self.index.get(col).copied().ok_or_else(|| {
            Error::usage(format!("{what} is missing column '{col}' (has: {})", self.names.join(", ")))
        })
    }

    pub fn float(&self, row: usize, col: usize) -> Result<f64> {
        let s = self.rows[row].get(col).unwrap_or("").trim();
        s.parse::<f64>().map_err(|_| {
            Error::usage(format!(
                "line {}: column '{}' holds '{s}', not a number",
                row + 2,
                self.names[col]
            ))
        })
    }

    pub fn text(&self, row: usize, col: usize) -> &str {
        self.rows[row].get(col).unwrap_or("").trim()
    }

    /// Levels present as `lower_<L>` columns, in file order.
    pub fn levels(&self) -> Vec<f64> {
        self.names
            .iter()
            .filter_map(|n| n.strip_prefix("lower_"))
            .filter_map(level_from_label)
            .collect()
    }
}
