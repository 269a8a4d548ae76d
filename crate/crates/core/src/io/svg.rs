//! Standalone SVG scatter figures.
//!
//! Panels are laid out row-major, `columns` per row, each a square plot
//! with the same axis limits. Points are circles of radius
//! [`POINT_RADIUS`] coloured by class from [`PALETTE`]. All coordinates are
//! printed with two decimals, so identical inputs give identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Vec2;

pub const MAX_PANELS: usize = 8;
pub const MAX_POINTS: usize = 100_000;
pub const POINT_RADIUS: f64 = 0.8;
pub const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"];

const PANEL: f64 = 320.0;
const MARGIN: f64 = 24.0;
const TITLE: f64 = 22.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub label: String,
    /// `(class, point)` pairs.
    pub points: Vec<(usize, Vec2)>,
}

impl Panel {
    pub fn from_classes(label: impl Into<String>, per_class: &[Vec<Vec2>]) -> Self {
        let points = per_class
            .iter()
            .enumerate()
            .flat_map(|(c, pts)| pts.iter().map(move |&p| (c, p)))
            .collect();
        Self { label: label.into(), points }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layout {
    pub columns: usize,
    pub min: Vec2,
    pub max: Vec2,
}

impl Layout {
    /// Square axes around the finite points of all panels, padded by 5%.
    pub fn fitting(panels: &[Panel], columns: usize) -> Self {
        let (mut lo, mut hi) = (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
        for (_, p) in panels.iter().flat_map(|p| &p.points).filter(|(_, p)| p.is_finite()) {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        if !(lo.x <= hi.x) {
            return Self { columns, min: Vec2::new(-1.0, -1.0), max: Vec2::new(1.0, 1.0) };
        }
        let c = (lo + hi) * 0.5;
        let half = 0.5 * (hi.x - lo.x).max(hi.y - lo.y).max(1e-9) * 1.05;
        Self { columns, min: Vec2::new(c.x - half, c.y - half), max: Vec2::new(c.x + half, c.y + half) }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_svg(panels: &[Panel], layout: &Layout) -> Result<String> {
    if panels.len() > MAX_PANELS {
        return Err(Error::Usage(format!("at most {MAX_PANELS} panels per figure, got {}", panels.len())));
    }
    if let Some(p) = panels.iter().find(|p| p.points.len() > MAX_POINTS) {
        return Err(Error::Usage(format!("panel {:?} has {} points, limit {MAX_POINTS}", p.label, p.points.len())));
    }
    if layout.columns == 0 || !(layout.min.x < layout.max.x && layout.min.y < layout.max.y) {
        return Err(Error::Usage("figure layout needs columns >= 1 and a non-empty axis range".into()));
    }
    let cols = layout.columns.min(panels.len().max(1));
    let rows = panels.len().max(1).div_ceil(cols);
    let cell_w = PANEL + 2.0 * MARGIN;
    let cell_h = PANEL + 2.0 * MARGIN + TITLE;
    let (width, height) = (cell_w * cols as f64, cell_h * rows as f64);
    let sx = PANEL / (layout.max.x - layout.min.x);
    let sy = PANEL / (layout.max.y - layout.min.y);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, panel) in panels.iter().enumerate() {
        let ox = (i % cols) as f64 * cell_w + MARGIN;
        let oy = (i / cols) as f64 * cell_h + MARGIN + TITLE;
        let _ = writeln!(s, r#"<g id="panel{i}">"#);
        let _ = writeln!(s, r#"<clipPath id="clip{i}"><rect x="{ox:.2}" y="{oy:.2}" width="{PANEL:.2}" height="{PANEL:.2}"/></clipPath>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{}</text>"#,
            ox + PANEL / 2.0,
            oy - 8.0,
            escape(&panel.label)
        );
        let _ = writeln!(s, r#"<rect x="{ox:.2}" y="{oy:.2}" width="{PANEL:.2}" height="{PANEL:.2}" fill="none" stroke="black"/>"#);
        for (v, anchor, x, y) in [
            (layout.min.x, "start", ox, oy + PANEL + 14.0),
            (layout.max.x, "end", ox + PANEL, oy + PANEL + 14.0),
        ] {
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}" font-size="10">{v:.2}</text>"#);
        }
        for (v, y) in [(layout.min.y, oy + PANEL), (layout.max.y, oy + 10.0)] {
            let _ = writeln!(s, r#"<text x="{:.2}" y="{y:.2}" text-anchor="end" font-size="10">{v:.2}</text>"#, ox - 3.0);
        }
        let _ = writeln!(s, r#"<g clip-path="url(#clip{i})" fill-opacity="0.6" stroke="none">"#);
        for &(class, p) in panel.points.iter().filter(|(_, p)| p.is_finite()) {
            let cx = ox + (p.x - layout.min.x) * sx;
            let cy = oy + (layout.max.y - p.y) * sy;
            let _ = writeln!(
                s,
                r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{POINT_RADIUS}" fill="{}"/>"#,
                PALETTE[class % PALETTE.len()]
            );
        }
        let _ = writeln!(s, "</g>\n</g>");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_scatter_svg(panels: &[Panel], layout: &Layout, path: &Path) -> Result<()> {
    let svg = render_svg(panels, layout)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Panel titles of the six-panel guidance comparison, in display order.
pub const FIG2_PANELS: [&str; 6] = [
    "(a) ground truth",
    "(b) unguided",
    "(c) CFG",
    "(d) score truncation",
    "(e) autoguidance",
    "(f) in-situ autoguidance",
];

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(label: &str, n: usize) -> Panel {
        Panel {
            label: label.into(),
            points: (0..n).map(|i| (i % 2, Vec2::new((i as f64).sin(), (i as f64 * 0.7).cos()))).collect(),
        }
    }

    #[test]
    fn empty_panel_has_axes_and_label() {
        let panels = [Panel { label: "empty <set>".into(), points: vec![] }];
        let svg = render_svg(&panels, &Layout::fitting(&panels, 3)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("empty &lt;set&gt;"));
        assert!(svg.contains(r#"fill="none" stroke="black""#));
        assert!(!svg.contains("<circle"));
    }

    #[test]
    fn output_is_byte_stable_and_ordered() {
        let panels: Vec<Panel> = FIG2_PANELS.iter().map(|l| panel(l, 200)).collect();
        let layout = Layout::fitting(&panels, 3);
        let a = render_svg(&panels, &layout).unwrap();
        assert_eq!(a, render_svg(&panels.clone(), &layout).unwrap());
        let pos: Vec<usize> = FIG2_PANELS.iter().map(|l| a.find(&escape(l)).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a.matches("<circle").count(), 1200);
        assert!(a.contains(r#"width="1104""#));
    }

    #[test]
    fn limits_are_enforced() {
        let many: Vec<Panel> = (0..9).map(|i| panel(&i.to_string(), 1)).collect();
        assert!(render_svg(&many, &Layout::fitting(&many, 3)).is_err());
        let big = [panel("big", MAX_POINTS + 1)];
        assert!(render_svg(&big, &Layout::fitting(&big, 1)).is_err());
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("missing").join("f.svg");
        let one = [panel("one", 3)];
        assert!(matches!(emit_scatter_svg(&one, &Layout::fitting(&one, 1), &bad), Err(Error::Io { .. })));
    }
}
