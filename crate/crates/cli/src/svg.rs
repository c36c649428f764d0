use std::fmt::Write;

use clr_mpc_core::model::Model;
use clr_mpc_core::sim::BatchStats;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 180.0;
const MARGIN: f64 = 40.0;

/// Bounds on each state and input implied by single-variable constraint rows.
pub fn variable_bounds(model: &Model) -> Vec<(Option<f64>, Option<f64>)> {
    let (f, g, b) = (&model.c.f, &model.c.g, &model.c.b);
    let nx = f.ncols();
    let mut out = vec![(None, None); nx + g.ncols()];
    for r in 0..b.len() {
        let row: Vec<f64> = f.row(r).iter().chain(g.row(r).iter()).copied().collect();
        let nz: Vec<usize> = (0..row.len()).filter(|&c| row[c] != 0.0).collect();
        if let [c] = nz.as_slice() {
            let v = b[r] / row[*c];
            let (lo, hi) = &mut out[*c];
            if row[*c] > 0.0 {
                *hi = Some(hi.map_or(v, |h: f64| h.min(v)));
            } else {
                *lo = Some(lo.map_or(v, |l: f64| l.max(v)));
            }
        }
    }
    out
}

/// One panel per variable: the min/max band over runs plus dashed bound lines.
pub fn envelope_svg(stats: &BatchStats, nx: usize, bounds: &[(Option<f64>, Option<f64>)]) -> String {
    let (steps, nvar) = stats.envelope_min.shape();
    let cols = 2;
    let rows = nvar.div_ceil(cols);
    let width = cols as f64 * (PANEL_W + MARGIN) + MARGIN;
    let height = rows as f64 * (PANEL_H + MARGIN) + MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for v in 0..nvar {
        let ox = MARGIN + (v % cols) as f64 * (PANEL_W + MARGIN);
        let oy = MARGIN + (v / cols) as f64 * (PANEL_H + MARGIN);
        let lo: Vec<f64> = (0..steps).map(|k| stats.envelope_min[(k, v)]).collect();
        let hi: Vec<f64> = (0..steps).map(|k| stats.envelope_max[(k, v)]).collect();
        let (blo, bhi) = bounds.get(v).copied().unwrap_or((None, None));
        let mut ymin = lo.iter().chain(blo.iter()).copied().fold(f64::INFINITY, f64::min);
        let mut ymax = hi.iter().chain(bhi.iter()).copied().fold(f64::NEG_INFINITY, f64::max);
        if !(ymin.is_finite() && ymax.is_finite()) {
            (ymin, ymax) = (-1.0, 1.0);
        }
        let pad = 0.05 * (ymax - ymin).max(1e-9);
        let (ymin, ymax) = (ymin - pad, ymax + pad);
        let px = |k: usize| ox + PANEL_W * k as f64 / (steps.max(2) - 1) as f64;
        let py = |y: f64| oy + PANEL_H * (ymax - y) / (ymax - ymin);
        let name = if v < nx { format!("x{}", v + 1) } else { format!("u{}", v - nx + 1) };

        let _ = writeln!(s, r##"<rect x="{ox}" y="{oy}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#888"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{name}</text>"#, ox + 4.0, oy - 6.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.2}</text>"#, ox - 4.0, oy + 10.0, ymax);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.2}</text>"#, ox - 4.0, oy + PANEL_H, ymin);
        if steps > 0 {
            let mut pts: Vec<String> = (0..steps).map(|k| format!("{:.2},{:.2}", px(k), py(hi[k]))).collect();
            pts.extend((0..steps).rev().map(|k| format!("{:.2},{:.2}", px(k), py(lo[k]))));
            let _ = writeln!(
                s,
                r##"<polygon points="{}" fill="#4a7ebb" fill-opacity="0.35" stroke="#2b5d99" stroke-width="1"/>"##,
                pts.join(" ")
            );
        }
        for b in [blo, bhi].into_iter().flatten() {
            let y = py(b);
            let _ = writeln!(
                s,
                r##"<line x1="{ox}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#c0392b" stroke-dasharray="5,3"/>"##,
                ox + PANEL_W
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use clr_mpc_core::linalg::Matrix;

    #[test]
    fn msd_bounds_are_the_box() {
        let b = variable_bounds(&Model::msd());
        assert_eq!(b.len(), 6);
        assert!(b.iter().all(|&(lo, hi)| lo == Some(-2.0) && hi == Some(2.0)));
    }

    #[test]
    fn renders_one_band_per_variable() {
        let stats = BatchStats {
            mean_cost: 0.0,
            envelope_min: Matrix::from_element(3, 2, -1.0),
            envelope_max: Matrix::from_element(3, 2, 1.0),
            infeasible_count: 0,
            violation_count: 0,
        };
        let svg = envelope_svg(&stats, 1, &[(Some(-2.0), Some(2.0)), (None, None)]);
        assert_eq!(svg.matches("<polygon").count(), 2);
        assert_eq!(svg.matches("<line").count(), 2);
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
