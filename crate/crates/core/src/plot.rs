//! Learning curves across runs: median with a min-max band, written as an
//! SVG image and a plain-text table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{BitError, Result};

const LOG_FILES: [&str; 2] = ["train_log.jsonl", "eval_log.jsonl"];
const NON_METRICS: [&str; 4] = ["env_step", "iter", "episode", "kind"];

/// Aggregated curve: one row per environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveTable {
    pub metric: String,
    pub rows: Vec<CurveRow>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub env_step: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Runs contributing to this step.
    pub runs: usize,
}

/// Per-run series of `metric` keyed by environment step; several records at
/// the same step are averaged. Also returns every numeric key seen.
fn read_run(dir: &Path, metric: &str) -> Result<(BTreeMap<usize, f64>, BTreeSet<String>)> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut found_log = false;
    for file in LOG_FILES {
        let path = dir.join(file);
        if !path.exists() {
            continue;
        }
        found_log = true;
        let text = std::fs::read_to_string(&path)?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: Value = serde_json::from_str(line)
                .map_err(|e| BitError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            let Value::Object(map) = v else { continue };
            for (k, val) in &map {
                if val.is_number() && !NON_METRICS.contains(&k.as_str()) {
                    seen.insert(k.clone());
                }
            }
            let (Some(step), Some(y)) = (
                map.get("env_step").and_then(Value::as_u64),
                map.get(metric).and_then(Value::as_f64),
            ) else {
                continue;
            };
            let e = sums.entry(step as usize).or_insert((0.0, 0));
            e.0 += y;
            e.1 += 1;
        }
    }
    if !found_log {
        return Err(BitError::Argument(format!("{} holds no run logs", dir.display())));
    }
    Ok((sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(), seen))
}

fn median_of(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Aggregates `metric` over the runs.
pub fn collect_curves(run_dirs: &[PathBuf], metric: &str) -> Result<CurveTable> {
    if run_dirs.is_empty() {
        return Err(BitError::Usage("no run directories given".into()));
    }
    let mut series = Vec::new();
    let mut available = BTreeSet::new();
    for dir in run_dirs {
        let (s, seen) = read_run(dir, metric)?;
        available.extend(seen);
        series.push(s);
    }
    if series.iter().all(BTreeMap::is_empty) {
        let list: Vec<String> = available.into_iter().collect();
        return Err(BitError::Argument(format!(
            "metric `{metric}` not found; available: {}",
            list.join(", ")
        )));
    }
    let steps: BTreeSet<usize> = series.iter().flat_map(|s| s.keys().copied()).collect();
    let rows = steps
        .into_iter()
        .map(|step| {
            let mut ys: Vec<f64> = series.iter().filter_map(|s| s.get(&step).copied()).collect();
            let min = ys.iter().copied().fold(f64::INFINITY, f64::min);
            let max = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            CurveRow {
                env_step: step,
                median: median_of(&mut ys),
                min,
                max,
                runs: ys.len(),
            }
        })
        .collect();
    Ok(CurveTable {
        metric: metric.to_string(),
        rows,
    })
}

pub fn format_table(table: &CurveTable) -> String {
    let mut out = format!(
        "# {}\n{:>10} {:>14} {:>14} {:>14} {:>5}\n",
        table.metric, "env_step", "median", "min", "max", "runs"
    );
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{:>10} {:>14.6} {:>14.6} {:>14.6} {:>5}",
            r.env_step, r.median, r.min, r.max, r.runs
        );
    }
    out
}

/// Thins a long table to at most `limit` evenly spaced rows for drawing.
fn thin(rows: &[CurveRow], limit: usize) -> Vec<CurveRow> {
    if rows.len() <= limit {
        return rows.to_vec();
    }
    let stride = rows.len().div_ceil(limit);
    let mut out: Vec<CurveRow> = rows.iter().step_by(stride).copied().collect();
    if out.last() != rows.last() {
        out.push(*rows.last().unwrap());
    }
    out
}

pub fn render_svg(table: &CurveTable) -> String {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (80.0, 20.0, 30.0, 50.0);
    let rows = thin(&table.rows, 1500);
    let x0 = rows.first().map_or(0.0, |r| r.env_step as f64);
    let x1 = rows.last().map_or(1.0, |r| r.env_step as f64).max(x0 + 1.0);
    let mut y0 = rows.iter().map(|r| r.min).fold(f64::INFINITY, f64::min);
    let mut y1 = rows.iter().map(|r| r.max).fold(f64::NEG_INFINITY, f64::max);
    if y1.partial_cmp(&y0) != Some(std::cmp::Ordering::Greater) {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| top + (y1 - y) / (y1 - y0) * (h - top - bottom);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let band: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2},{:.2}", px(r.env_step as f64), py(r.max)))
        .chain(
            rows.iter()
                .rev()
                .map(|r| format!("{:.2},{:.2}", px(r.env_step as f64), py(r.min))),
        )
        .collect();
    let _ = writeln!(
        svg,
        r##"<polygon points="{}" fill="#4a7fd4" fill-opacity="0.25" stroke="none"/>"##,
        band.join(" ")
    );
    let line: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2},{:.2}", px(r.env_step as f64), py(r.median)))
        .collect();
    let _ = writeln!(
        svg,
        r##"<polyline points="{}" fill="none" stroke="#1f4f9c" stroke-width="1.5"/>"##,
        line.join(" ")
    );
    let (bx, by) = (h - bottom, w - right);
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{bx}" x2="{by}" y2="{bx}" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bx}" stroke="black"/>"#
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}</text>"#,
            px(xv),
            bx + 18.0,
            xv
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            left - 6.0,
            py(yv) + 4.0,
            yv
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">environment steps</text>"#,
        (left + by) / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{left}" y="18">{} (median, min-max band)</text>"#,
        table.metric
    );
    svg.push_str("</svg>\n");
    svg
}

/// Writes the image to `out` and the table next to it with a `.txt`
/// extension. Returns the table path.
pub fn plot_curves(run_dirs: &[PathBuf], metric: &str, out: &Path) -> Result<(CurveTable, PathBuf)> {
    let table = collect_curves(run_dirs, metric)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, render_svg(&table))?;
    let table_path = out.with_extension("txt");
    std::fs::write(&table_path, format_table(&table))?;
    Ok((table, table_path))
}
