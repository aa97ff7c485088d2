use std::fmt::Write;

use crate::geometry::PointCloud;

const PANEL: f64 = 240.0;
const MARGIN: f64 = 12.0;

/// Three orthographic scatter panels (xy, xz, yz) sharing one scale.
pub fn render(cloud: &PointCloud, title: &str) -> String {
    let extent = cloud
        .points()
        .iter()
        .flat_map(|p| p.iter().map(|c| c.abs()))
        .fold(1e-9, f64::max);
    let scale = (PANEL / 2.0 - MARGIN) / extent;
    let width = 3.0 * PANEL;
    let height = PANEL + 24.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, (name, a, b)) in [("xy", 0, 1), ("xz", 0, 2), ("yz", 1, 2)].into_iter().enumerate() {
        let x0 = i as f64 * PANEL;
        let _ = writeln!(s, r#"<g class="panel" id="{name}">"#);
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="0" width="{PANEL}" height="{PANEL}" fill="none" stroke="#999"/>"##,
            x0 + 0.5
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="14" text-anchor="middle">{name}</text>"#,
            x0 + PANEL / 2.0,
            PANEL + 18.0
        );
        for p in cloud.points() {
            let cx = x0 + PANEL / 2.0 + p[a] * scale;
            let cy = PANEL / 2.0 - p[b] * scale;
            let _ = writeln!(s, r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="1.2" fill="#246"/>"##);
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
