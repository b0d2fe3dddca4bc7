//! Metrics export: CSV pass-through and deterministic SVG line plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{HarnessError, Result};
use crate::metrics::MetricsLog;

pub enum ExportKind {
    Csv,
    Svg,
}

pub fn export(log: &MetricsLog, kind: ExportKind, path: &Path) -> Result<()> {
    if log.is_empty() {
        return Err(HarnessError::EmptyLog);
    }
    let text = match kind {
        ExportKind::Csv => log.to_csv(),
        ExportKind::Svg => render_svg(log),
    };
    std::fs::write(path, text)?;
    Ok(())
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 20.0;
const MARGIN_B: f64 = 45.0;

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Validation-loss curves: one thin line per (phase, seed), one thick
/// line per phase mean. Output depends only on the log contents.
pub fn render_svg(log: &MetricsLog) -> String {
    // (phase, seed) -> series of (step, val_loss); NaN rows dropped.
    let mut series: BTreeMap<(String, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for r in log.rows() {
        if r.val_loss.is_finite() {
            series
                .entry((r.phase.clone(), r.seed))
                .or_default()
                .push((r.step as f64, r.val_loss));
        }
    }
    let all: Vec<(f64, f64)> = series.values().flatten().copied().collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut phases: Vec<String> = series.keys().map(|(p, _)| p.clone()).collect();
    phases.dedup();

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    // Axes
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN_L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{}" stroke="black"/>"#,
        HEIGHT - MARGIN_B
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">step</text>"#,
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 15 {})">val loss</text>"#,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0
    );
    // Tick labels at the extremes.
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN_L}" y="{}" text-anchor="middle" font-size="11">{x0:.0}</text>"#,
        HEIGHT - MARGIN_B + 16.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">{x1:.0}</text>"#,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B + 16.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{y0:.4}</text>"#,
        MARGIN_L - 5.0,
        HEIGHT - MARGIN_B
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{y1:.4}</text>"#,
        MARGIN_L - 5.0,
        MARGIN_T + 10.0
    );

    let polyline = |pts: &[(f64, f64)], color: &str, width: f64, opacity: f64| -> String {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        format!(
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}" stroke-opacity="{opacity}"/>"#,
            coords.join(" ")
        )
    };

    for (pi, phase) in phases.iter().enumerate() {
        let color = PALETTE[pi % PALETTE.len()];
        // Per-seed thin lines.
        let mut mean: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for ((p, _), pts) in &series {
            if p != phase {
                continue;
            }
            let _ = writeln!(svg, "{}", polyline(pts, color, 1.0, 0.45));
            for &(x, y) in pts {
                let e = mean.entry(x.round() as u64).or_insert((0.0, 0));
                e.0 += y;
                e.1 += 1;
            }
        }
        let mean_pts: Vec<(f64, f64)> = mean
            .iter()
            .map(|(&x, &(sum, n))| (x as f64, sum / n as f64))
            .collect();
        let _ = writeln!(svg, "{}", polyline(&mean_pts, color, 2.5, 1.0));
        // Legend
        let ly = MARGIN_T + 16.0 * pi as f64 + 8.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2.5"/>"#,
            WIDTH - 140.0,
            WIDTH - 115.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12">{phase}</text>"#,
            WIDTH - 110.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
