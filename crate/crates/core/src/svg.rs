//! Minimal SVG writer for report figures (heatmaps, scatter maps, dendrograms, boxplots).

use std::fmt::Write as _;

pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Self {
            width,
            height,
            body: String::new(),
        }
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
    }

    pub fn outline(&mut self, x: f64, y: f64, w: f64, h: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="{stroke}"/>"#
        );
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="1"/>"#
        );
    }

    pub fn circle(&mut self, cx: f64, cy: f64, r: f64, fill: &str, stroke: Option<&str>) {
        let stroke = stroke
            .map(|s| format!(r#" stroke="{s}" stroke-width="1.2""#))
            .unwrap_or_default();
        let _ = writeln!(
            self.body,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="{fill}"{stroke}/>"#
        );
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="{size}" font-family="sans-serif" text-anchor="{anchor}">{}</text>"#,
            esc(s)
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

/// Distinct color per index (golden-angle hue walk).
pub fn palette(i: usize) -> String {
    let hue = (i as f64 * 137.508) % 360.0;
    let light = if i % 2 == 0 { 45.0 } else { 60.0 };
    format!("hsl({hue:.1},70%,{light}%)")
}

/// White → dark blue ramp for `t` in [0, 1].
pub fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * (1.0 - t) + 8.0 * t).round() as u8;
    let g = (255.0 * (1.0 - t) + 48.0 * t).round() as u8;
    let b = (255.0 * (1.0 - t) + 107.0 * t).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Row-normalized heatmap with cell annotations.
pub fn heatmap(title: &str, labels: &[String], values: &[Vec<f64>]) -> String {
    let n = labels.len();
    let cell = if n > 20 { 18.0 } else { 36.0 };
    let margin = 90.0;
    let mut svg = Svg::new(margin + cell * n as f64 + 20.0, margin + cell * n as f64 + 40.0);
    svg.text(margin, 20.0, 14.0, "start", title);
    svg.text(margin + cell * n as f64 / 2.0, 40.0, 11.0, "middle", "predicted");
    svg.text(12.0, margin - 8.0, 11.0, "start", "true");
    for (i, row) in values.iter().enumerate() {
        let total: f64 = row.iter().sum();
        svg.text(margin - 6.0, margin + cell * (i as f64 + 0.65), 10.0, "end", &labels[i]);
        for (j, &v) in row.iter().enumerate() {
            let frac = if total > 0.0 { v / total } else { 0.0 };
            let (x, y) = (margin + cell * j as f64, margin + cell * i as f64);
            svg.rect(x, y, cell, cell, &ramp(frac));
            if n <= 20 && v > 0.0 {
                svg.text(x + cell / 2.0, y + cell * 0.62, 9.0, "middle", &format!("{frac:.2}"));
            }
        }
    }
    for (j, l) in labels.iter().enumerate() {
        svg.text(margin + cell * (j as f64 + 0.5), margin - 6.0, 10.0, "middle", l);
    }
    svg.outline(margin, margin, cell * n as f64, cell * n as f64, "#333");
    svg.finish()
}
