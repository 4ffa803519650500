//! Dependency-free SVG box plots drawn from [`SummaryStats`].
//!
//! Each box is a `<g class="series">` carrying its label and statistics as
//! `data-*` attributes, with children of class `box`, `median`, `whisker`,
//! `cap` and `outlier`.

use std::fmt::Write;

use crate::metrics::SummaryStats;

const WIDTH_PER_BOX: f64 = 90.0;
const HEIGHT: f64 = 360.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const BOX_WIDTH: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders one box per `(label, stats)` pair, left to right. The value axis
/// spans `[0, 1]`, widened to include every plotted value.
pub fn box_plot_svg(title: &str, y_label: &str, series: &[(String, SummaryStats)]) -> String {
    let mut lo: f64 = 0.0;
    let mut hi: f64 = 1.0;
    for (_, s) in series {
        let extremes = s.outliers.iter().copied().chain([s.whisker_lo, s.whisker_hi]);
        for v in extremes {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let width = MARGIN_LEFT + MARGIN_RIGHT + WIDTH_PER_BOX * series.len().max(1) as f64;
    let y = |v: f64| MARGIN_TOP + (hi - v) / (hi - lo) * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{HEIGHT}" viewBox="0 0 {width} {HEIGHT}" data-y-min="{lo}" data-y-max="{hi}">"#
    );
    let _ = writeln!(
        out,
        r#"<text class="title" x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    let axis_bottom = MARGIN_TOP + plot_h;
    let _ = writeln!(
        out,
        r#"<line class="axis" x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{axis_bottom}" stroke="black"/>"#
    );
    for i in 0..=5 {
        let v = lo + (hi - lo) * i as f64 / 5.0;
        let ty = y(v);
        let _ = writeln!(
            out,
            r#"<line class="tick" x1="{}" y1="{ty}" x2="{MARGIN_LEFT}" y2="{ty}" stroke="black"/><text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.2}</text>"#,
            MARGIN_LEFT - 4.0,
            MARGIN_LEFT - 6.0,
            ty + 3.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    );

    for (i, (label, s)) in series.iter().enumerate() {
        let cx = MARGIN_LEFT + WIDTH_PER_BOX * (i as f64 + 0.5);
        let (x0, x1) = (cx - BOX_WIDTH / 2.0, cx + BOX_WIDTH / 2.0);
        let (cap0, cap1) = (cx - BOX_WIDTH / 4.0, cx + BOX_WIDTH / 4.0);
        let _ = writeln!(
            out,
            r#"<g class="series" data-label="{}" data-n="{}" data-q1="{}" data-median="{}" data-q3="{}" data-whisker-lo="{}" data-whisker-hi="{}">"#,
            escape(label),
            s.n,
            s.q1,
            s.median,
            s.q3,
            s.whisker_lo,
            s.whisker_hi
        );
        let _ = writeln!(
            out,
            r##"  <line class="whisker" x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="black"/>"##,
            y(s.q3),
            y(s.whisker_hi)
        );
        let _ = writeln!(
            out,
            r##"  <line class="whisker" x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="black"/>"##,
            y(s.q1),
            y(s.whisker_lo)
        );
        for w in [s.whisker_lo, s.whisker_hi] {
            let _ = writeln!(
                out,
                r#"  <line class="cap" x1="{cap0}" y1="{}" x2="{cap1}" y2="{}" stroke="black"/>"#,
                y(w),
                y(w)
            );
        }
        let _ = writeln!(
            out,
            r##"  <rect class="box" x="{x0}" y="{}" width="{BOX_WIDTH}" height="{}" fill="#9ecae1" stroke="black"/>"##,
            y(s.q3),
            y(s.q1) - y(s.q3)
        );
        let _ = writeln!(
            out,
            r##"  <line class="median" x1="{x0}" y1="{}" x2="{x1}" y2="{}" stroke="#d62728" stroke-width="2"/>"##,
            y(s.median),
            y(s.median)
        );
        for o in &s.outliers {
            let _ = writeln!(
                out,
                r#"  <circle class="outlier" cx="{cx}" cy="{}" r="3" fill="none" stroke="black" data-value="{o}"/>"#,
                y(*o)
            );
        }
        let _ = writeln!(
            out,
            r#"  <text class="label" x="{cx}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            axis_bottom + 18.0,
            escape(label)
        );
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}
