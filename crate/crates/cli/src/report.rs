//! Report artifacts: result table, learning curves and an SVG plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use refine_core::eval::{compare, Comparison, EvalResult, Improvement};
use refine_core::policy::IterationLog;

use crate::formats::{write_atomic, write_json, FormatError};

/// Mean return per iteration, averaged over seeds, for each method.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningCurves {
    pub series: Vec<(String, Vec<f64>)>,
}

impl LearningCurves {
    /// `logs` holds one run log per seed for each method. Iterations missing
    /// from some seeds are averaged over the seeds that have them.
    pub fn from_logs(logs: &[(String, Vec<Vec<IterationLog>>)]) -> Self {
        let series = logs
            .iter()
            .map(|(name, runs)| {
                let len = runs.iter().map(Vec::len).max().unwrap_or(0);
                let curve = (0..len)
                    .map(|i| {
                        let vals: Vec<f64> = runs.iter().filter_map(|r| r.get(i)).map(|l| l.mean_return).collect();
                        vals.iter().sum::<f64>() / vals.len() as f64
                    })
                    .collect();
                (name.clone(), curve)
            })
            .collect();
        Self { series }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> FormatError {
    FormatError::Malformed { path: path.into(), line: 0, message: e.to_string() }
}

fn csv_bytes(path: &Path, rows: Vec<Vec<String>>) -> Result<Vec<u8>, FormatError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.into_inner().map_err(|e| FormatError::Malformed { path: path.into(), line: 0, message: e.to_string() })
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

pub fn write_report_csv(path: &Path, results: &[(String, EvalResult)]) -> Result<(), FormatError> {
    let mut rows = vec![["method", "mean", "std", "episodes", "seeds"].map(String::from).to_vec()];
    for (name, r) in results {
        let seeds: Vec<String> = r.per_seed.iter().map(|s| s.seed.to_string()).collect();
        rows.push(vec![name.clone(), num(r.pooled_mean), num(r.pooled_std), r.episodes.to_string(), seeds.join(";")]);
    }
    write_atomic(path, &csv_bytes(path, rows)?)
}

pub fn write_learning_curve_csv(path: &Path, curves: &LearningCurves) -> Result<(), FormatError> {
    let mut rows = vec![["iter", "method", "mean_return"].map(String::from).to_vec()];
    for (name, curve) in &curves.series {
        for (i, v) in curve.iter().enumerate() {
            rows.push(vec![i.to_string(), name.clone(), num(*v)]);
        }
    }
    write_atomic(path, &csv_bytes(path, rows)?)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line chart of the learning curves; output depends only on the input.
pub fn render_svg(curves: &LearningCurves, title: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 130.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let len = curves.series.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let all = curves.series.iter().flat_map(|(_, c)| c.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let x = |i: usize| left + if len > 1 { pw * i as f64 / (len - 1) as f64 } else { pw / 2.0 };
    let y = |v: f64| top + ph * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for k in 0..=4 {
        let v = lo + (hi - lo) * f64::from(k) / 4.0;
        let yy = y(v);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{yy:.2}" x2="{}" y2="{yy:.2}" stroke="#dddddd"/>"##, left + pw);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.2}</text>"#, left - 6.0, yy + 3.0);
    }
    if len > 0 {
        let _ = writeln!(s, r#"<text x="{left}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">0</text>"#, top + ph + 15.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#, x(len - 1), top + ph + 15.0, len - 1);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">iteration</text>"#, left + pw / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">mean return</text>"#, top + ph / 2.0, top + ph / 2.0);
    for (k, (name, curve)) in curves.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> =
            curve.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, v)| format!("{:.2},{:.2}", x(i), y(*v))).collect();
        if !pts.is_empty() {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#, lx + 26.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Plain-text table of `mean (±std)` rows and the improvement line.
pub fn render_table(c: &Comparison) -> String {
    let mut s = String::new();
    let width = c.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    for r in &c.rows {
        let _ = writeln!(s, "{:<width$}  {}", r.method, r.display);
    }
    let _ = match c.improvement {
        Improvement::Percent(p) => writeln!(s, "improvement of {} over {}: {p:.1}%", c.method, c.baseline),
        Improvement::AbsoluteDifference(d) => {
            writeln!(s, "improvement of {} over {}: {d:+.3} (absolute; baseline mean is 0)", c.method, c.baseline)
        }
    };
    s
}

/// Writes `report.csv`, `learning_curve.csv`, `learning_curve.svg` and
/// `comparison.json` (when both named methods are present) into `dir`.
pub fn emit_report(
    dir: &Path,
    results: &[(String, EvalResult)],
    curves: &LearningCurves,
    method: &str,
    baseline: &str,
    title: &str,
) -> Result<Option<Comparison>, FormatError> {
    write_report_csv(&dir.join("report.csv"), results)?;
    write_learning_curve_csv(&dir.join("learning_curve.csv"), curves)?;
    write_atomic(&dir.join("learning_curve.svg"), render_svg(curves, title).as_bytes())?;
    let comparison = compare(results, method, baseline).ok();
    if let Some(c) = &comparison {
        write_json(&dir.join("comparison.json"), c)?;
        write_atomic(&dir.join("comparison.txt"), render_table(c).as_bytes())?;
    }
    Ok(comparison)
}

/// Groups `(method, seed) -> log` pairs by method, seeds in ascending order.
pub fn group_logs(logs: BTreeMap<(String, u64), Vec<IterationLog>>, order: &[String]) -> Vec<(String, Vec<Vec<IterationLog>>)> {
    order
        .iter()
        .map(|m| {
            let runs = logs.iter().filter(|((name, _), _)| name == m).map(|(_, l)| l.clone()).collect();
            (m.clone(), runs)
        })
        .collect()
}
