//! Scatter plots of real and generated points as standalone SVG.

use std::fmt::Write as _;

use crate::error::{invalid, Result};
use crate::guide::{points_box, scale_box, BBox};
use crate::synthdata::Point;

pub const REAL_CLASS: &str = "real";
pub const GENERATED_CLASS: &str = "generated";

fn bbox(points: &[Point]) -> BBox {
    let m = crate::numcore::Matrix::from_shape_fn((points.len(), 2), |(i, j)| points[i][j]);
    points_box(&m)
}

/// One `<circle>` per point. The view box is the real data's bounding
/// box scaled by 1.1 about its center; `y` is flipped so up is positive.
pub fn scatter_svg(real: &[Point], generated: &[Point]) -> Result<String> {
    if real.is_empty() {
        return Err(invalid("real", "no data points to plot"));
    }
    if generated.is_empty() {
        return Err(invalid("generated", "no generated points to plot"));
    }
    let mut b = scale_box(bbox(real), 1.1);
    // keep a visible extent for degenerate data
    for (lo, hi) in [(0, 2), (1, 3)] {
        if !(b[hi] > b[lo]) {
            b[lo] -= 0.5;
            b[hi] += 0.5;
        }
    }
    let (w, h) = (b[2] - b[0], b[3] - b[1]);
    let r = 0.003 * w.max(h);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{:.6} {:.6} {:.6} {:.6}" width="600" height="{:.0}">"#,
        b[0],
        -b[3],
        w,
        h,
        600.0 * h / w
    );
    let _ = writeln!(
        s,
        "<style>.{REAL_CLASS}{{fill:#d62728;fill-opacity:0.5}}.{GENERATED_CLASS}{{fill:#1f77b4;fill-opacity:0.5}}</style>"
    );
    for (class, pts) in [(REAL_CLASS, real), (GENERATED_CLASS, generated)] {
        let _ = writeln!(s, r#"<g class="{class}">"#);
        for p in pts {
            let _ = writeln!(s, r#"<circle cx="{:.6}" cy="{:.6}" r="{:.6}"/>"#, p[0], -p[1], r);
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}
