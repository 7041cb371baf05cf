//! Minimal standalone SVG charts.

use std::fmt::Write as _;

use super::PrPoint;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;

struct Frame {
    x_max: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        MARGIN + v / self.x_max * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - v / self.y_max * (HEIGHT - 2.0 * MARGIN)
    }

    fn open(&self, out: &mut String, title: &str, x_label: &str, y_label: &str) {
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{title}</text>"#, WIDTH / 2.0);
        let (x0, y0, x1, y1) = (self.x(0.0), self.y(0.0), self.x(self.x_max), self.y(self.y_max));
        let _ = writeln!(out, r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, WIDTH / 2.0, HEIGHT - 12.0);
        let _ = writeln!(
            out,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0
        );
        for (v, anchor_x, anchor_y) in [(0.0, x0, y0), (self.x_max, x1, y0)] {
            let _ = writeln!(out, r#"<text x="{anchor_x}" y="{}" text-anchor="middle">{}</text>"#, anchor_y + 14.0, fmt_tick(v));
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 - 4.0, y1 + 4.0, fmt_tick(self.y_max));
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">0</text>"#, x0 - 4.0, y0 + 4.0);
    }

    fn polyline(&self, out: &mut String, points: &[(f64, f64)], color: &str) {
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", self.x(x), self.y(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            coords.join(" ")
        );
    }
}

fn fmt_tick(v: f64) -> String {
    if v >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Precision (y) against recall (x).
pub fn pr_curve_svg(points: &[PrPoint]) -> String {
    let frame = Frame { x_max: 1.0, y_max: 1.0 };
    let mut out = String::new();
    frame.open(&mut out, "Precision-recall", "recall", "precision");
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    frame.polyline(&mut out, &pts, "steelblue");
    for (x, y) in pts {
        let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="steelblue"/>"#, frame.x(x), frame.y(y));
    }
    out.push_str("</svg>\n");
    out
}

/// Iteration time against iteration index, with the budget as a dashed line.
pub fn timing_svg(elapsed: &[f64], budget: Option<f64>) -> String {
    let peak = elapsed.iter().copied().fold(0.0, f64::max);
    let y_max = budget.filter(|b| b.is_finite()).map_or(peak, |b| peak.max(b)).max(1e-9) * 1.05;
    let frame = Frame {
        x_max: elapsed.len().max(1) as f64,
        y_max,
    };
    let mut out = String::new();
    frame.open(&mut out, "Iteration time", "iteration", "seconds");
    let pts: Vec<(f64, f64)> = elapsed.iter().enumerate().map(|(i, &t)| (i as f64, t)).collect();
    frame.polyline(&mut out, &pts, "darkorange");
    if let Some(b) = budget.filter(|b| b.is_finite()) {
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black" stroke-dasharray="4 3"/>"#,
            frame.x(0.0),
            frame.x(frame.x_max),
            y = frame.y(b)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_closed_svg() {
        let p = PrPoint {
            threshold: Some(0.1),
            precision: 1.0,
            recall: 0.5,
            tp: 1,
            fp: 0,
            gt_count: 2,
        };
        let svg = pr_curve_svg(&[p]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        let svg = timing_svg(&[0.1, 0.2, 0.15], Some(0.18));
        assert!(svg.contains("stroke-dasharray"));
        assert!(timing_svg(&[], None).contains("</svg>"));
    }
}
