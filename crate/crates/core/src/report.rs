//! Box-plot quantiles and SVG box plots from per-path metrics.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::PatientMetrics;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("metrics file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("no metrics rows")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const METRICS: [&str; 5] = ["rmse", "mae", "pct_identical", "msd", "hsd"];
pub const POOLED: &str = "pooled";

/// One row of the per-path metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub patient: String,
    pub path_id: u64,
    pub values: [f64; 5],
}

impl From<&PatientMetrics> for MetricRow {
    fn from(p: &PatientMetrics) -> Self {
        let m = &p.metrics;
        MetricRow {
            patient: p.patient.clone(),
            path_id: m.path_id,
            values: [m.rmse, m.mae, m.pct_identical, m.msd, m.hsd],
        }
    }
}

/// Reads the CSV written by `evaluation::write_metrics_csv`.
pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>, ReportError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let err = |reason: &str| ReportError::Parse {
            line: i + 1,
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 7 {
            return Err(err("expected at least 7 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
        rows.push(MetricRow {
            patient: f[0].to_string(),
            path_id: f[1].parse().map_err(|_| err("bad path id"))?,
            values: [num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?],
        });
    }
    Ok(rows)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub group: String,
    pub metric: String,
    pub n: usize,
    /// Lower whisker: smallest value within 1.5 IQR of q1.
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Upper whisker.
    pub max: f64,
    /// `(path_id, value)` beyond the whiskers.
    pub outliers: Vec<(u64, f64)>,
}

pub fn box_stats(group: &str, metric: &str, values: &[(u64, f64)]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.1).collect();
    v.sort_by(f64::total_cmp);
    let q1 = quantile(&v, 0.25);
    let q3 = quantile(&v, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v.iter().cloned().filter(|x| *x >= lo && *x <= hi).collect();
    let mut outliers: Vec<(u64, f64)> = values.iter().cloned().filter(|x| x.1 < lo || x.1 > hi).collect();
    outliers.sort_by_key(|x| x.0);
    Some(BoxStats {
        group: group.to_string(),
        metric: metric.to_string(),
        n: v.len(),
        min: inside.first().cloned().unwrap_or(q1),
        q1,
        median: quantile(&v, 0.5),
        q3,
        max: inside.last().cloned().unwrap_or(q3),
        outliers,
    })
}

/// Box statistics per patient and pooled, for every metric.
pub fn quantiles(rows: &[MetricRow]) -> Result<Vec<BoxStats>, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut patients: Vec<&str> = rows.iter().map(|r| r.patient.as_str()).collect();
    patients.sort();
    patients.dedup();
    let mut out = Vec::new();
    for (mi, metric) in METRICS.iter().enumerate() {
        for p in &patients {
            let vals: Vec<(u64, f64)> = rows
                .iter()
                .filter(|r| r.patient == *p)
                .map(|r| (r.path_id, r.values[mi]))
                .collect();
            out.extend(box_stats(p, metric, &vals));
        }
        let all: Vec<(u64, f64)> = rows.iter().map(|r| (r.path_id, r.values[mi])).collect();
        out.extend(box_stats(POOLED, metric, &all));
    }
    Ok(out)
}

pub fn write_quantiles_csv(path: impl AsRef<Path>, stats: &[BoxStats]) -> Result<(), ReportError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "patient,metric,n,min,q1,median,q3,max,outliers")?;
    for s in stats {
        let o: Vec<String> = s.outliers.iter().map(|(id, v)| format!("{id}:{v}")).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.group,
            s.metric,
            s.n,
            s.min,
            s.q1,
            s.median,
            s.q3,
            s.max,
            o.join(";")
        )?;
    }
    w.flush()?;
    Ok(())
}

/// A standalone SVG with one box per group for a single metric.
pub fn box_plot_svg(metric: &str, stats: &[&BoxStats]) -> String {
    let (w, h, pad) = (120.0 * stats.len().max(1) as f64 + 80.0, 360.0, 40.0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in stats {
        lo = lo.min(s.min);
        hi = hi.max(s.max);
        for o in &s.outliers {
            lo = lo.min(o.1);
            hi = hi.max(o.1);
        }
    }
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let y = |v: f64| h - pad - (v - lo) / (hi - lo) * (h - 2.0 * pad);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle">{metric}</text>"#, w / 2.0);
    let _ = writeln!(svg, r#"<text x="4" y="{:.1}">{hi:.4}</text>"#, y(hi));
    let _ = writeln!(svg, r#"<text x="4" y="{:.1}">{lo:.4}</text>"#, y(lo));
    for (i, s) in stats.iter().enumerate() {
        let cx = 80.0 + 120.0 * i as f64 + 50.0;
        let (x0, x1) = (cx - 30.0, cx + 30.0);
        let _ = writeln!(
            svg,
            r#"<line x1="{cx}" y1="{:.2}" x2="{cx}" y2="{:.2}" stroke="black"/>"#,
            y(s.min),
            y(s.max)
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{x0}" y="{:.2}" width="60" height="{:.2}" fill="#cfe0f3" stroke="black"/>"##,
            y(s.q3),
            (y(s.q1) - y(s.q3)).max(0.5)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{x0}" y1="{m:.2}" x2="{x1}" y2="{m:.2}" stroke="black" stroke-width="2"/>"#,
            m = y(s.median)
        );
        for (_, v) in &s.outliers {
            let _ = writeln!(svg, r#"<circle cx="{cx}" cy="{:.2}" r="2" fill="none" stroke="red"/>"#, y(*v));
        }
        let _ = writeln!(
            svg,
            r#"<text x="{cx}" y="{}" text-anchor="middle">{} (n={})</text>"#,
            h - 12.0,
            s.group,
            s.n
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `quantiles.csv` and one `box_<metric>.svg` per metric into `dir`.
pub fn write_report(dir: impl AsRef<Path>, rows: &[MetricRow]) -> Result<Vec<PathBuf>, ReportError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let stats = quantiles(rows)?;
    let mut written = vec![dir.join("quantiles.csv")];
    write_quantiles_csv(&written[0], &stats)?;
    for metric in METRICS {
        let group: Vec<&BoxStats> = stats.iter().filter(|s| s.metric == metric).collect();
        let p = dir.join(format!("box_{metric}.svg"));
        fs::write(&p, box_plot_svg(metric, &group))?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_of_known_data() {
        let v: Vec<(u64, f64)> = (1..=9).map(|i| (i, i as f64)).chain([(100, 100.0)]).collect();
        let s = box_stats("a", "rmse", &v).unwrap();
        assert_eq!(s.median, 5.5);
        assert_eq!(s.q1, 3.25);
        assert_eq!(s.q3, 7.75);
        assert_eq!(s.max, 9.0);
        assert_eq!(s.outliers, vec![(100, 100.0)]);
    }

    #[test]
    fn constant_data_has_no_outliers() {
        let s = box_stats("a", "mae", &[(0, 0.0), (1, 0.0), (2, 0.0)]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(s.outliers.is_empty());
        assert!(box_plot_svg("mae", &[&s]).starts_with("<svg"));
    }
}
