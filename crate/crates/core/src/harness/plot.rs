//! Minimal SVG line chart of aggregate curves.

use std::fmt::Write as _;

use super::experiment::AggregateRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// Median with 5th/95th percentile envelopes of `J` (`metric == "J"`) or of
/// `|grad J|^2` against the iteration index.
pub fn line_chart_svg(rows: &[AggregateRow], metric: &str) -> String {
    let pick = |r: &AggregateRow| if metric == "J" { r.j } else { r.grad_norm_sq };
    let finite: Vec<f64> = rows.iter().flat_map(pick).filter(|x| x.is_finite()).collect();
    let (mut lo, mut hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let n = rows.len().max(2) as f64;
    let x = |i: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / (n - 1.0);
    let y = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12">{hi:.4e}</text>"#, 2.0, MARGIN);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12">{lo:.4e}</text>"#, 2.0, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12">iteration (1..{})</text>"#,
        WIDTH / 2.0 - 40.0,
        HEIGHT - 15.0,
        rows.len()
    );
    for (k, (color, dash)) in [("black", ""), ("gray", "4 3"), ("gray", "4 3")].iter().enumerate() {
        let mut d = String::new();
        for (i, r) in rows.iter().enumerate() {
            let v = pick(r)[k];
            if v.is_finite() {
                let _ = write!(d, "{}{:.2} {:.2} ", if d.is_empty() { "M" } else { "L" }, x(i), y(v));
            }
        }
        let _ = writeln!(
            s,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-dasharray="{dash}"/>"#,
            d.trim_end()
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14">{metric}</text>"#, MARGIN);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_three_curves() {
        let rows: Vec<AggregateRow> = (1..=5)
            .map(|i| AggregateRow {
                iter: i,
                runs: 1,
                j: [i as f64; 3],
                grad_norm_sq: [1.0; 3],
            })
            .collect();
        let svg = line_chart_svg(&rows, "J");
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("stroke-dasharray").count(), 3);
        assert!(line_chart_svg(&rows, "grad_norm_sq").contains("</svg>"));
    }
}
