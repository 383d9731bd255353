//! Self-contained SVG line charts for sweep results and trajectory paths.
//!
//! No external assets, fonts, or scripts: every plot is a single `<svg>`
//! document that renders anywhere. Log axes drop non-positive points rather
//! than erroring, because sweep code routinely feeds metrics that include a
//! diverged run's NaN.

use std::fmt::Write;

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Dashed stroke; used for fitted lines so data and fit read differently.
    pub dashed: bool,
    /// Larger marker on the first point; used for trajectory start states.
    pub emphasize_start: bool,
}

impl Series {
    pub fn line(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series { name: name.into(), points, dashed: false, emphasize_start: false }
    }
}

#[derive(Debug, Clone)]
pub struct ChartSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
}

const W: f64 = 640.0;
const H: f64 = 440.0;
const MARGIN_L: f64 = 76.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 48.0;
const MARGIN_B: f64 = 58.0;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];
/// Legends past this many series obscure the data; the plot omits them.
const LEGEND_LIMIT: usize = 8;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e4).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// `ln` for log axes, identity otherwise; `None` for points the axis cannot
/// represent (non-finite anywhere, non-positive under log).
fn axis_value(v: f64, log: bool) -> Option<f64> {
    if !v.is_finite() || (log && v <= 0.0) {
        return None;
    }
    Some(if log { v.ln() } else { v })
}

/// Renders series as polylines with point markers over linear or log axes.
/// Series with no representable points are skipped but keep their palette
/// slot, so colors stay stable across related charts.
pub fn line_chart(spec: &ChartSpec, series: &[Series]) -> String {
    let mapped: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter_map(|&(x, y)| Some((axis_value(x, spec.log_x)?, axis_value(y, spec.log_y)?)))
                .collect()
        })
        .collect();

    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for pts in &mapped {
        for &(x, y) in pts {
            lo = (lo.0.min(x), lo.1.min(y));
            hi = (hi.0.max(x), hi.1.max(y));
        }
    }
    if lo.0 > hi.0 {
        // Nothing representable; draw an empty frame rather than failing.
        lo = (0.0, 0.0);
        hi = (1.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| -> (f64, f64) {
        if hi - lo < 1e-12 {
            (lo - 1.0, hi + 1.0)
        } else {
            let p = (hi - lo) * 0.05;
            (lo - p, hi + p)
        }
    };
    let (x0, x1) = pad(lo.0, hi.0);
    let (y0, y1) = pad(lo.1, hi.1);

    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (W - MARGIN_L - MARGIN_R);
    let py = |y: f64| H - MARGIN_B - (y - y0) / (y1 - y0) * (H - MARGIN_T - MARGIN_B);

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(out, "<rect width=\"{W}\" height=\"{H}\" fill=\"#ffffff\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        (MARGIN_L + W - MARGIN_R) / 2.0,
        esc(&spec.title)
    );

    // Axes, ticks, grid.
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let tx = x0 + f * (x1 - x0);
        let ty = y0 + f * (y1 - y0);
        let (gx, gy) = (px(tx), py(ty));
        let x_disp = if spec.log_x { tx.exp() } else { tx };
        let y_disp = if spec.log_y { ty.exp() } else { ty };
        let _ = writeln!(
            out,
            "<line x1=\"{gx:.1}\" y1=\"{:.1}\" x2=\"{gx:.1}\" y2=\"{:.1}\" stroke=\"#e0e0e0\"/>",
            py(y0),
            py(y1)
        );
        let _ = writeln!(
            out,
            "<line x1=\"{:.1}\" y1=\"{gy:.1}\" x2=\"{:.1}\" y2=\"{gy:.1}\" stroke=\"#e0e0e0\"/>",
            px(x0),
            px(x1)
        );
        let _ = writeln!(
            out,
            "<text x=\"{gx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            H - MARGIN_B + 18.0,
            fmt_num(x_disp)
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            MARGIN_L - 8.0,
            gy + 4.0,
            fmt_num(y_disp)
        );
    }
    let _ = writeln!(
        out,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{:.1}\" height=\"{:.1}\" \
         fill=\"none\" stroke=\"#333333\"/>",
        W - MARGIN_L - MARGIN_R,
        H - MARGIN_T - MARGIN_B
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        (MARGIN_L + W - MARGIN_R) / 2.0,
        H - 14.0,
        esc(&spec.x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">{}</text>",
        (MARGIN_T + H - MARGIN_B) / 2.0,
        (MARGIN_T + H - MARGIN_B) / 2.0,
        esc(&spec.y_label)
    );

    for (i, (s, pts)) in series.iter().zip(&mapped).enumerate() {
        if pts.is_empty() {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"{dash}/>",
            path.join(" ")
        );
        if !s.dashed {
            for (j, &(x, y)) in pts.iter().enumerate() {
                let r = if s.emphasize_start && j == 0 { 5.0 } else { 2.6 };
                let _ = writeln!(
                    out,
                    "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"{r}\" fill=\"{color}\"/>",
                    px(x),
                    py(y)
                );
            }
        }
    }

    if series.len() <= LEGEND_LIMIT {
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let ly = MARGIN_T + 16.0 + i as f64 * 16.0;
            let lx = W - MARGIN_R - 150.0;
            let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
            let _ = writeln!(
                out,
                "<line x1=\"{lx:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" \
                 stroke=\"{color}\" stroke-width=\"1.8\"{dash}/>",
                lx + 24.0
            );
            let _ = writeln!(
                out,
                "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
                lx + 30.0,
                ly + 4.0,
                esc(&s.name)
            );
        }
    }

    out.push_str("</svg>\n");
    out
}
