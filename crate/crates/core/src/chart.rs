//! Static SVG line charts of attack reports: mean cost and mean return
//! against the perturbation budget, one line per attack kind.

use std::fmt::Write;

use crate::attacks::AttackKind;
use crate::pipeline::AggregateReport;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 44.0;
const GAP: f64 = 80.0;
const LEGEND_W: f64 = 130.0;

const PALETTE: [&str; 7] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf",
];

#[derive(Clone, Copy)]
enum Metric {
    Cost,
    Return,
}

impl Metric {
    fn label(self) -> &'static str {
        match self {
            Metric::Cost => "mean cost",
            Metric::Return => "mean return",
        }
    }

    fn of(self, r: &AggregateReport) -> f64 {
        match self {
            Metric::Cost => r.mean_cost,
            Metric::Return => r.mean_return,
        }
    }
}

fn kinds_in_order(reports: &[AggregateReport]) -> Vec<AttackKind> {
    let mut kinds = Vec::new();
    for r in reports {
        if !kinds.contains(&r.attack) {
            kinds.push(r.attack);
        }
    }
    kinds
}

fn colour(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

/// Render `reports` as a two-panel chart. Unattacked rows are drawn as a
/// dashed horizontal reference line.
pub fn sweep_chart_svg(title: &str, reports: &[AggregateReport]) -> String {
    let width = MARGIN_L + 2.0 * PANEL_W + GAP + LEGEND_W;
    let height = MARGIN_T + PANEL_H + MARGIN_B;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<text x="{MARGIN_L}" y="18" font-size="14">{}</text>"#,
        escape(title)
    )
    .unwrap();

    let kinds = kinds_in_order(reports);
    let x_max = reports.iter().map(|r| r.epsilon).fold(0.0f64, f64::max);
    let x_max = if x_max > 0.0 { x_max } else { 1.0 };

    for (p, metric) in [Metric::Cost, Metric::Return].into_iter().enumerate() {
        let left = MARGIN_L + p as f64 * (PANEL_W + GAP);
        panel(&mut svg, reports, &kinds, metric, left, x_max);
    }

    let lx = MARGIN_L + 2.0 * PANEL_W + GAP + 16.0;
    for (i, kind) in kinds.iter().enumerate() {
        let y = MARGIN_T + 14.0 + 18.0 * i as f64;
        let dash = if *kind == AttackKind::None {
            r#" stroke-dasharray="5,4""#
        } else {
            ""
        };
        writeln!(
            svg,
            r#"<line x1="{lx}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"{dash}/>"#,
            lx + 22.0,
            colour(i)
        )
        .unwrap();
        writeln!(svg, r#"<text x="{}" y="{}">{kind}</text>"#, lx + 28.0, y + 4.0).unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn panel(svg: &mut String, reports: &[AggregateReport], kinds: &[AttackKind], metric: Metric, left: f64, x_max: f64) {
    let values: Vec<f64> = reports.iter().map(|r| metric.of(r)).filter(|v| v.is_finite()).collect();
    let mut lo = values.iter().copied().fold(0.0f64, f64::min);
    let mut hi = values.iter().copied().fold(0.0f64, f64::max);
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    lo -= if lo < 0.0 { pad } else { 0.0 };
    hi += pad;
    let top = MARGIN_T;
    let bottom = MARGIN_T + PANEL_H;
    let sx = |x: f64| left + x / x_max * PANEL_W;
    let sy = |y: f64| bottom - (y - lo) / (hi - lo) * PANEL_H;

    writeln!(
        svg,
        r##"<rect x="{left}" y="{top}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#444"/>"##
    )
    .unwrap();
    for k in 0..=4 {
        let fx = x_max * k as f64 / 4.0;
        let fy = lo + (hi - lo) * k as f64 / 4.0;
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(fx),
            bottom + 16.0,
            tick(fx)
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(fy) + 4.0,
            tick(fy)
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">epsilon</text>"#,
        left + PANEL_W / 2.0,
        bottom + 34.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="{left}" y="{:.1}">{}</text>"#,
        top - 6.0,
        metric.label()
    )
    .unwrap();

    for (i, kind) in kinds.iter().enumerate() {
        let mut rows: Vec<&AggregateReport> = reports.iter().filter(|r| r.attack == *kind).collect();
        rows.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
        if *kind == AttackKind::None {
            let y = sy(metric.of(rows[0]));
            writeln!(
                svg,
                r#"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{}" stroke-width="1.5" stroke-dasharray="5,4"/>"#,
                left + PANEL_W,
                colour(i)
            )
            .unwrap();
            continue;
        }
        let points: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.1},{:.1}", sx(r.epsilon), sy(metric.of(r))))
            .collect();
        writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            points.join(" "),
            colour(i)
        )
        .unwrap();
        for r in rows {
            writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{}"/>"#,
                sx(r.epsilon),
                sy(metric.of(r)),
                colour(i)
            )
            .unwrap();
        }
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
