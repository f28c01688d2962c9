//! Minimal SVG plots: stacked loss curves and grouped mIoU bars.

use std::fmt::Write as _;
use std::path::Path;

use crate::curves::Curves;
use crate::error::{Error, Result};

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One small panel per curve name, stacked vertically.
pub fn curves_svg(curves: &Curves, title: &str) -> String {
    let names = curves.names();
    let (w, ph, m) = (560.0, 120.0, 40.0);
    let h = m + names.len() as f64 * (ph + m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14">{}</text>"#, m, esc(title));
    for (i, name) in names.iter().enumerate() {
        let series = curves.series(name);
        let top = m + i as f64 * (ph + m);
        let (x0, x1) = (m + 30.0, w - m);
        let xs: Vec<f64> = series.iter().map(|p| p.0 as f64).collect();
        let ys: Vec<f64> = series.iter().map(|p| p.1).filter(|v| v.is_finite()).collect();
        let (xmin, xmax) = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        let (mut ymin, mut ymax) = (ys.iter().cloned().fold(f64::INFINITY, f64::min), ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        if !(ymin.is_finite() && ymax.is_finite()) {
            ymin = 0.0;
            ymax = 1.0;
        }
        if ymax - ymin < 1e-12 {
            ymax = ymin + 1.0;
        }
        let xr = if xmax > xmin { xmax - xmin } else { 1.0 };
        let _ = writeln!(
            s,
            r##"<rect x="{x0}" y="{top}" width="{}" height="{ph}" fill="none" stroke="#999"/>"##,
            x1 - x0
        );
        let _ = writeln!(s, r#"<text x="{x0}" y="{}">{}</text>"#, top - 4.0, esc(name));
        let _ = writeln!(s, r#"<text x="2" y="{}">{:.3}</text>"#, top + 10.0, ymax);
        let _ = writeln!(s, r#"<text x="2" y="{}">{:.3}</text>"#, top + ph, ymin);
        let pts: Vec<String> = series
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| {
                let px = x0 + (x as f64 - xmin) / xr * (x1 - x0);
                let py = top + ph - (y - ymin) / (ymax - ymin) * ph;
                format!("{px:.1},{py:.1}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            COLORS[i % COLORS.len()],
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bars: one group per category, one bar per series. Values are
/// fractions in `[0, 1]` drawn on a 0-100 axis.
pub fn bars_svg(title: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let (m, gw, bh) = (50.0, 24.0 * series.len().max(1) as f64 + 20.0, 220.0);
    let w = 2.0 * m + gw * categories.len() as f64 + 140.0;
    let h = bh + 2.0 * m + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{m}" y="20" font-size="14">{}</text>"#, esc(title));
    let base = m + bh;
    let _ = writeln!(s, r##"<line x1="{m}" y1="{base}" x2="{}" y2="{base}" stroke="#333"/>"##, m + gw * categories.len() as f64);
    for t in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let y = base - t / 100.0 * bh;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{t:.0}</text>"#, m - 4.0, y + 4.0);
    }
    for (ci, cat) in categories.iter().enumerate() {
        let gx = m + ci as f64 * gw + 10.0;
        for (si, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(ci).copied().unwrap_or(0.0).clamp(0.0, 1.0);
            let bhv = v * bh;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="20" height="{:.1}" fill="{}"/>"#,
                gx + si as f64 * 24.0,
                base - bhv,
                bhv,
                COLORS[si % COLORS.len()]
            );
        }
        let _ = writeln!(s, r#"<text x="{gx}" y="{}">{}</text>"#, base + 14.0, esc(cat));
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let lx = m + gw * categories.len() as f64 + 20.0;
        let ly = m + si as f64 * 16.0;
        let _ = writeln!(s, r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{}"/>"#, ly - 9.0, COLORS[si % COLORS.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, lx + 14.0, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

pub fn write(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svgs_are_well_formed_and_deterministic() {
        let mut c = Curves::new();
        for i in 0..5 {
            c.push(i * 10, "loss", 1.0 / (i as f64 + 1.0));
            c.push(i * 10, "flat", 2.0);
        }
        let a = curves_svg(&c, "run <1>");
        assert_eq!(a, curves_svg(&c, "run <1>"));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("run &lt;1&gt;"));
        assert_eq!(a.matches("<polyline").count(), 2);
        let b = bars_svg("miou", &["fog".into(), "rain".into()], &[("m0".into(), vec![0.5, 0.6])]);
        assert_eq!(b.matches("<rect").count(), 3);
    }
}
