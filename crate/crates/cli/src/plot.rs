//! Robustness curves as standalone SVG line charts.
//!
//! Output depends only on the parsed rows and the title; every coordinate is
//! printed with fixed precision so identical input yields identical bytes.

use std::fmt::Write as _;

use tsrobust::evaluation::CsvRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders one chart: ε on the x axis from 0 to the largest ε, robust
/// accuracy in `[0, 1]` on the y axis, one polyline with point markers per
/// attack in order of first appearance.
pub fn render_svg(rows: &[CsvRow], title: &str) -> String {
    let mut attacks: Vec<&str> = Vec::new();
    for r in rows {
        if !attacks.contains(&r.attack.as_str()) {
            attacks.push(&r.attack);
        }
    }
    let max_eps = rows.iter().map(|r| r.epsilon).fold(0.0, f64::max);
    let x_span = if max_eps > 0.0 { max_eps } else { 1.0 };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |eps: f64| LEFT + eps / x_span * plot_w;
    let py = |acc: f64| TOP + (1.0 - acc) * plot_h;

    let mut s = String::new();
    let w = &mut s;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        w,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(title)
    )
    .unwrap();

    for i in 0..=4 {
        let acc = i as f64 / 4.0;
        let y = py(acc);
        writeln!(
            w,
            r##"<line x1="{LEFT:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
            LEFT + plot_w
        )
        .unwrap();
        writeln!(
            w,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{acc:.2}</text>"#,
            LEFT - 6.0,
            y + 4.0
        )
        .unwrap();
    }
    let mut ticks: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    ticks.push(0.0);
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for eps in ticks {
        let x = px(eps);
        writeln!(
            w,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#000000"/>"##,
            TOP + plot_h,
            TOP + plot_h + 5.0
        )
        .unwrap();
        writeln!(
            w,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{eps:.2}</text>"#,
            TOP + plot_h + 18.0
        )
        .unwrap();
    }
    writeln!(
        w,
        r##"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="#000000"/>"##
    )
    .unwrap();
    writeln!(
        w,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">epsilon</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    )
    .unwrap();
    writeln!(
        w,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">robust accuracy</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    )
    .unwrap();

    for (k, attack) in attacks.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.attack == *attack)
            .map(|r| (r.epsilon, r.robust_accuracy))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let coords: Vec<String> = pts.iter().map(|&(e, a)| format!("{:.2},{:.2}", px(e), py(a))).collect();
        if coords.len() > 1 {
            writeln!(
                w,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                coords.join(" ")
            )
            .unwrap();
        }
        for &(e, a) in &pts {
            writeln!(
                w,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                px(e),
                py(a)
            )
            .unwrap();
        }
        let ly = TOP + 10.0 + 20.0 * k as f64;
        let lx = LEFT + plot_w + 15.0;
        writeln!(
            w,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        )
        .unwrap();
        writeln!(
            w,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(attack)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(attack: &str, epsilon: f64, acc: f64) -> CsvRow {
        CsvRow {
            attack: attack.into(),
            epsilon,
            robust_accuracy: acc,
            mean_queries: 1.0,
            n_examples: 1,
        }
    }

    #[test]
    fn single_point_has_one_marker_and_no_line() {
        let svg = render_svg(&[row("pgd", 0.3, 0.5)], "t");
        assert_eq!(svg.matches("<circle").count(), 1);
        assert_eq!(svg.matches("<polyline").count(), 0);
    }

    #[test]
    fn one_polyline_per_attack_and_escaped_title() {
        let rows = [
            row("a", 0.1, 1.0),
            row("a", 0.2, 0.5),
            row("b", 0.1, 0.9),
            row("b", 0.2, 0.1),
        ];
        let svg = render_svg(&rows, "x < y");
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("x &lt; y"));
    }
}
