//! SVG overlay of one frame: every feature, plus the associations whose
//! select-out weight exceeds the display threshold, each with a bar showing
//! its weight.

use std::fmt::Write;

use geokernel::geometry::{Coords, GeometricFeature, Line2};

/// Associations at or below this weight are not drawn.
pub const DISPLAY_THRESHOLD: f64 = 0.10;

pub struct Shown<'a> {
    pub kind: &'a str,
    pub nodes: &'a [usize],
    pub weight: f64,
}

const COLOURS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn anchor(f: &GeometricFeature) -> [f64; 2] {
    match f.coords {
        Coords::Point2d(p) => p,
        Coords::Point3d(p) => [p[0], p[1]],
        Coords::Line2d(l) => match l.endpoints {
            Some([p, q]) => [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])],
            None => {
                // Foot of the perpendicular from the origin.
                let [a, b, c] = l.abc;
                [-a * c, -b * c]
            }
        },
    }
}

/// Segment of `l` to draw: its endpoints, or its chord through the view box.
fn segment(l: &Line2, view: [f64; 4]) -> Option<[[f64; 2]; 2]> {
    if let Some(e) = l.endpoints {
        return Some(e);
    }
    let [a, b, c] = l.abc;
    let [x0, y0, w, h] = view;
    let mut pts = Vec::new();
    if b.abs() > 1e-12 {
        for x in [x0, x0 + w] {
            let y = -(a * x + c) / b;
            if (y0..=y0 + h).contains(&y) {
                pts.push([x, y]);
            }
        }
    }
    if a.abs() > 1e-12 {
        for y in [y0, y0 + h] {
            let x = -(b * y + c) / a;
            if (x0..=x0 + w).contains(&x) {
                pts.push([x, y]);
            }
        }
    }
    (pts.len() >= 2).then(|| [pts[0], pts[pts.len() - 1]])
}

fn view_box(frame: &[GeometricFeature]) -> [f64; 4] {
    let mut lo = [0.0f64, 0.0];
    let mut hi = [640.0f64, 480.0];
    for f in frame {
        let mut grow = |p: [f64; 2]| {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        };
        match f.coords {
            Coords::Line2d(Line2 { endpoints: Some([p, q]), .. }) => {
                grow(p);
                grow(q);
            }
            Coords::Line2d(_) => {}
            _ => grow(anchor(f)),
        }
    }
    let margin = 20.0;
    [lo[0] - margin, lo[1] - margin, hi[0] - lo[0] + 2.0 * margin, hi[1] - lo[1] + 2.0 * margin]
}

pub fn render(frame: &[GeometricFeature], shown: &[Shown<'_>]) -> String {
    let view = view_box(frame);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{} {} {} {}" width="{}" height="{}">"#,
        view[0], view[1], view[2], view[3], view[2], view[3]
    );
    let _ = writeln!(
        s,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="#ffffff"/>"##,
        view[0], view[1], view[2], view[3]
    );
    for f in frame {
        match &f.coords {
            Coords::Line2d(l) => {
                if let Some([p, q]) = segment(l, view) {
                    let _ = writeln!(
                        s,
                        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#888888" stroke-width="1.5"/>"##,
                        p[0], p[1], q[0], q[1]
                    );
                }
            }
            _ => {
                let [x, y] = anchor(f);
                let _ = writeln!(s, r##"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="#444444"/>"##);
            }
        }
        let [x, y] = anchor(f);
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{:.2}" font-size="9" fill="#666666">{}</text>"##,
            x + 4.0,
            y - 4.0,
            f.id
        );
    }
    let mut drawn = 0;
    for a in shown.iter().filter(|a| a.weight > DISPLAY_THRESHOLD) {
        let colour = COLOURS[drawn % COLOURS.len()];
        let pts: Vec<[f64; 2]> = a.nodes.iter().map(|&n| anchor(&frame[n])).collect();
        let path: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", p[0], p[1])).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="association" data-kind="{}" data-weight="{:.6}" points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            a.kind,
            a.weight,
            path.join(" ")
        );
        let base = pts[0];
        let (bar_w, bar_h) = (40.0, 5.0);
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{bar_w}" height="{bar_h}" fill="none" stroke="#000000" stroke-width="0.5"/>"##,
            base[0] + 6.0,
            base[1] + 6.0
        );
        let _ = writeln!(
            s,
            r#"<rect class="confidence" x="{:.2}" y="{:.2}" width="{:.2}" height="{bar_h}" fill="{colour}"/>"#,
            base[0] + 6.0,
            base[1] + 6.0,
            bar_w * a.weight
        );
        drawn += 1;
    }
    s.push_str("</svg>\n");
    s
}
