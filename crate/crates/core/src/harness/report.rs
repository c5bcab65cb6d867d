//! Sweep records and their CSV and SVG renderings.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 15] = [
    "config_id",
    "backbone",
    "exit_variant",
    "policy",
    "theta",
    "prune_p",
    "accuracy",
    "perplexity",
    "reduction_factor",
    "ops_backbone",
    "ops_classifiers",
    "ops_recompute",
    "mean_exit_depth",
    "degenerate_fraction",
    "valid",
];

/// One evaluated configuration. Layer-pruning rows carry `prune_p` and no
/// threshold; early-exit rows carry `theta` and no pruning level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub config_id: String,
    pub backbone: String,
    pub exit_variant: String,
    pub policy: String,
    pub theta: Option<f64>,
    pub prune_p: Option<usize>,
    pub accuracy: f64,
    pub perplexity: f64,
    pub reduction_factor: f64,
    pub ops_backbone: u64,
    pub ops_classifiers: u64,
    pub ops_recompute: u64,
    pub mean_exit_depth: f64,
    pub degenerate_fraction: f64,
    pub valid: bool,
}

impl SweepRecord {
    pub fn ops_spent(&self) -> u64 {
        self.ops_backbone + self.ops_classifiers + self.ops_recompute
    }
}

/// Orders records by reduction factor, then by id.
pub fn sort_records(records: &mut [SweepRecord]) {
    records.sort_by(|a, b| {
        a.reduction_factor
            .total_cmp(&b.reduction_factor)
            .then_with(|| a.config_id.cmp(&b.config_id))
    });
}

fn csv_err(e: csv::Error) -> Error {
    Error::Ingestion(format!("sweep csv: {e}"))
}

pub fn to_csv(records: &[SweepRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    if records.is_empty() {
        w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Ingestion(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parses a sweep CSV, requiring the exact column order.
pub fn parse_csv(text: &str) -> Result<Vec<SweepRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(csv_err)?;
    if !headers.iter().eq(CSV_COLUMNS) {
        return Err(Error::Ingestion(format!(
            "sweep csv header {:?} differs from the expected columns",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    rdr.deserialize().map(|r| r.map_err(csv_err)).collect()
}

pub fn write_csv(path: &Path, records: &[SweepRecord]) -> Result<()> {
    std::fs::write(path, to_csv(records)?).map_err(|e| Error::io(path, e))
}

const PALETTE: [(&str, &str); 5] = [
    ("recompute", "#1f77b4"),
    ("copy", "#ff7f0e"),
    ("skip", "#2ca02c"),
    ("prune", "#7f7f7f"),
    ("full", "#000000"),
];

fn colour(policy: &str) -> &'static str {
    PALETTE
        .iter()
        .find(|(p, _)| *p == policy)
        .map_or("#9467bd", |(_, c)| c)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Scatter of accuracy against reduction factor for the valid records, one
/// colour per policy; pruning levels are joined by a line.
pub fn render_svg(records: &[SweepRecord], title: &str) -> String {
    let (w, h, m) = (640.0, 420.0, 56.0);
    let pts: Vec<&SweepRecord> = records.iter().filter(|r| r.valid).collect();
    let span = |f: &dyn Fn(&SweepRecord) -> f64| {
        let lo = pts.iter().map(|r| f(r)).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|r| f(r)).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-9 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (x0, x1) = span(&|r| r.reduction_factor);
    let (y0, y1) = span(&|r| r.accuracy);
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{0}" stroke="black"/>"#,
        h - m,
        w - m
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{fx:.2}</text>"#, sx(fx), h - m + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{fy:.3}</text>"#, m - 6.0, sy(fy) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">reduction factor</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">next-token accuracy</text>"#,
        h / 2.0,
        h / 2.0
    );

    let mut prune: Vec<&&SweepRecord> = pts.iter().filter(|r| r.policy == "prune").collect();
    prune.sort_by(|a, b| a.reduction_factor.total_cmp(&b.reduction_factor));
    if prune.len() > 1 {
        let path: Vec<String> = prune
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r.reduction_factor), sy(r.accuracy)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-dasharray="4 3"/>"#,
            path.join(" "),
            colour("prune")
        );
    }
    for r in &pts {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{}" data-config="{}"><title>{}</title></circle>"#,
            sx(r.reduction_factor),
            sy(r.accuracy),
            colour(&r.policy),
            escape(&r.config_id),
            escape(&r.config_id)
        );
    }
    let mut policies: Vec<&str> = pts.iter().map(|r| r.policy.as_str()).collect();
    policies.sort_unstable();
    policies.dedup();
    for (i, p) in policies.iter().enumerate() {
        let y = m + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<circle cx="{}" cy="{y}" r="4" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            w - m - 80.0,
            colour(p),
            w - m - 70.0,
            y + 4.0,
            escape(p)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_svg(path: &Path, records: &[SweepRecord], title: &str) -> Result<()> {
    std::fs::write(path, render_svg(records, title)).map_err(|e| Error::io(path, e))
}
