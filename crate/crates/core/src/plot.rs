//! Standalone SVG line charts.

use std::fmt::Write as _;

use crate::detection::VideoSegment;
use crate::eval::precision_recall;
use crate::train::EpochMetrics;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of several series over shared axes.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], y_range: Option<(f64, f64)>) -> String {
    let all = series.iter().flat_map(|s| s.points.iter().copied());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in all.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if let Some((lo, hi)) = y_range {
        y0 = lo;
        y1 = hi;
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{left},{top} L{left},{bottom} L{right},{bottom}" stroke="black" fill="none"/>"#
    );
    for (v, anchor_x, anchor_y) in [(x0, left, bottom + 15.0), (x1, right, bottom + 15.0)] {
        let _ = writeln!(svg, r#"<text x="{anchor_x}" y="{anchor_y}" text-anchor="middle">{v:.3}</text>"#);
    }
    for (v, y) in [(y0, bottom), (y1, top)] {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, left - 5.0, y + 4.0);
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            right - 120.0,
            top + 15.0 * (i as f64 + 1.0),
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Training loss and, where evaluated, average mAP per epoch.
pub fn loss_curve(history: &[EpochMetrics]) -> String {
    let mut series = vec![Series {
        label: "train loss".into(),
        points: history.iter().map(|m| (m.epoch as f64, m.train_loss)).collect(),
    }];
    let maps: Vec<(f64, f64)> = history
        .iter()
        .filter_map(|m| m.eval.as_ref().map(|r| (m.epoch as f64, r.average_map)))
        .collect();
    if !maps.is_empty() {
        series.push(Series {
            label: "average mAP".into(),
            points: maps,
        });
    }
    line_chart("Training", "epoch", "value", &series, None)
}

/// Precision-recall curve of each class at `threshold`.
pub fn pr_curves(preds: &[VideoSegment], gts: &[VideoSegment], threshold: f64, labels: &[String]) -> String {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.segment.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let series: Vec<Series> = classes
        .into_iter()
        .map(|c| {
            let p: Vec<VideoSegment> = preds.iter().filter(|s| s.segment.class_id == c).cloned().collect();
            let g: Vec<VideoSegment> = gts.iter().filter(|s| s.segment.class_id == c).cloned().collect();
            Series {
                label: labels.get(c).cloned().unwrap_or_else(|| format!("class {c}")),
                points: precision_recall(&p, &g, threshold),
            }
        })
        .collect();
    line_chart(
        &format!("Precision-recall at tIoU {threshold}"),
        "recall",
        "precision",
        &series,
        Some((0.0, 1.0)),
    )
}
