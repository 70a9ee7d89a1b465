//! Deterministic SVG plots and CSV/text report emission.
//!
//! Everything here is a pure function of its inputs: no timestamps, fixed
//! float formatting, fixed palettes. Re-running a command reproduces every
//! output byte for byte.

use std::fmt::Write as _;

use crate::eval::{DropAttackReport, EfficiencyReport};
use crate::shapes::PointCloud;

/// 256-step blue-to-red ramp: step i has red = i, green = 0, blue = 255 - i,
/// with scores mapped linearly onto steps 0..=255.
pub fn score_color(score: f64) -> (u8, u8, u8) {
    let i = (score.clamp(0.0, 1.0) * 255.0).round() as u8;
    (i, 0, 255 - i)
}

/// Three orthographic projections (xy, xz, yz) of a scored cloud, points
/// colored on the blue-to-red ramp, the top-`circled` scorers ringed.
pub fn scatter_svg(pc: &PointCloud, scores: &[f64], circled: &[usize], title: &str) -> String {
    const PANEL: f64 = 260.0;
    const PAD: f64 = 30.0;
    const GAP: f64 = 20.0;
    let width = PAD * 2.0 + PANEL * 3.0 + GAP * 2.0;
    let height = PAD * 2.0 + PANEL + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" font-family="monospace" font-size="13" text-anchor="middle">{}</text>"#,
        width / 2.0,
        xml_escape(title)
    );
    let planes: [(&str, usize, usize); 3] = [("xy", 0, 1), ("xz", 0, 2), ("yz", 1, 2)];
    for (panel, (name, a, b)) in planes.iter().enumerate() {
        let x0 = PAD + panel as f64 * (PANEL + GAP);
        let y0 = PAD;
        let _ = writeln!(
            s,
            r##"<rect x="{x0:.1}" y="{y0:.1}" width="{PANEL}" height="{PANEL}" fill="none" stroke="#888" stroke-width="1"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="11" text-anchor="middle">{name}</text>"#,
            x0 + PANEL / 2.0,
            y0 + PANEL + 14.0
        );
        let project = |p: &[f64; 3]| -> (f64, f64) {
            let u = (p[*a] + 1.0) / 2.0;
            let v = (p[*b] + 1.0) / 2.0;
            (x0 + u * PANEL, y0 + (1.0 - v) * PANEL)
        };
        for (i, p) in pc.points.iter().enumerate() {
            let (cx, cy) = project(p);
            let (r, g, bl) = score_color(scores[i]);
            let _ = writeln!(
                s,
                r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="2" fill="#{r:02x}{g:02x}{bl:02x}"/>"##
            );
        }
        for &i in circled {
            let (cx, cy) = project(&pc.points[i]);
            let _ = writeln!(
                s,
                r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="4" fill="none" stroke="#000" stroke-width="0.8"/>"##
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Accuracy-vs-budget curves. Most-critical drops draw solid, least-critical
/// dashed; one color per scorer in report order.
pub fn curves_svg(reports: &[DropAttackReport], title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const ML: f64 = 60.0;
    const MR: f64 = 170.0;
    const MT: f64 = 40.0;
    const MB: f64 = 50.0;
    let plot_w = W - ML - MR;
    let plot_h = H - MT - MB;
    let max_budget = reports
        .iter()
        .flat_map(|r| r.budgets.iter())
        .copied()
        .max()
        .unwrap_or(1) as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" font-family="monospace" font-size="13" text-anchor="middle">{}</text>"#,
        ML + plot_w / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{ML}" y="{MT}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="#333" stroke-width="1"/>"##
    );
    // y ticks at 0, 0.25 .. 1 ; x ticks at each budget of the longest curve
    for t in 0..=4 {
        let frac = t as f64 / 4.0;
        let y = MT + (1.0 - frac) * plot_h;
        let _ = writeln!(
            s,
            r##"<line x1="{ML}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd" stroke-width="0.5"/>"##,
            ML + plot_w
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="10" text-anchor="end">{frac:.2}</text>"#,
            ML - 6.0,
            y + 3.0
        );
    }
    let budgets_for_ticks: Vec<usize> = reports
        .iter()
        .max_by_key(|r| r.budgets.len())
        .map(|r| r.budgets.clone())
        .unwrap_or_default();
    for &b in &budgets_for_ticks {
        let x = ML + b as f64 / max_budget * plot_w;
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" font-family="monospace" font-size="10" text-anchor="middle">{b}</text>"#,
            MT + plot_h + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="11" text-anchor="middle">points dropped</text>"#,
        ML + plot_w / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" font-family="monospace" font-size="11" transform="rotate(-90 16 {:.1})" text-anchor="middle">accuracy</text>"#,
        MT + plot_h / 2.0,
        MT + plot_h / 2.0
    );

    let mut scorer_color: Vec<(String, &str)> = Vec::new();
    let mut legend_y = MT + 10.0;
    for rep in reports {
        let color = match scorer_color.iter().find(|(n, _)| *n == rep.scorer) {
            Some((_, c)) => c,
            None => {
                let c = PALETTE[scorer_color.len() % PALETTE.len()];
                scorer_color.push((rep.scorer.clone(), c));
                c
            }
        };
        let dash = match rep.mode {
            crate::eval::Mode::Mcd => "",
            crate::eval::Mode::Lcd => r#" stroke-dasharray="6 3""#,
        };
        let pts: Vec<String> = rep
            .budgets
            .iter()
            .zip(&rep.accuracy)
            .map(|(&b, &a)| {
                let x = ML + b as f64 / max_budget * plot_w;
                let y = MT + (1.0 - a) * plot_h;
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.6"{dash}/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{legend_y:.1}" x2="{:.1}" y2="{legend_y:.1}" stroke="{color}" stroke-width="1.6"{dash}/>"#,
            ML + plot_w + 10.0,
            ML + plot_w + 34.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="10">{} {}</text>"#,
            ML + plot_w + 40.0,
            legend_y + 3.0,
            xml_escape(&rep.scorer),
            rep.mode.name()
        );
        legend_y += 16.0;
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One CSV per curve family: `scorer,mode,budget,accuracy`.
pub fn drop_curves_csv(reports: &[DropAttackReport]) -> String {
    let mut s = String::from("scorer,mode,budget,accuracy\n");
    for r in reports {
        for (&b, &a) in r.budgets.iter().zip(&r.accuracy) {
            let _ = writeln!(s, "{},{},{},{:.9}", r.scorer, r.mode.name(), b, a);
        }
    }
    s
}

pub fn efficiency_csv(reports: &[EfficiencyReport]) -> String {
    let mut s = String::from("scorer,forwards,backwards,params,ms_per_cloud\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.3}",
            r.scorer, r.forwards, r.backwards, r.explainer_params, r.ms_per_cloud
        );
    }
    s
}

/// Aligned human-readable summary of drop curves and efficiency.
pub fn text_report(
    baseline: f64,
    reports: &[DropAttackReport],
    efficiency: &[EfficiencyReport],
    variance: &[(String, f64)],
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "baseline_accuracy={baseline:.4}");
    let _ = writeln!(s);
    if let Some(first) = reports.first() {
        let _ = write!(s, "{:<16} {:<4}", "scorer", "mode");
        for b in &first.budgets {
            let _ = write!(s, " {b:>7}");
        }
        let _ = writeln!(s);
        for r in reports {
            let _ = write!(s, "{:<16} {:<4}", r.scorer, r.mode.name());
            for a in &r.accuracy {
                let _ = write!(s, " {a:>7.4}");
            }
            let _ = writeln!(s);
        }
    }
    if !variance.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<24} {:>10}", "score_variance", "value");
        for (name, v) in variance {
            let _ = writeln!(s, "{name:<24} {v:>10.6}");
        }
    }
    if !efficiency.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>9} {:>8} {:>12}",
            "scorer", "forwards", "backwards", "params", "ms_per_cloud"
        );
        for r in efficiency {
            let _ = writeln!(
                s,
                "{:<16} {:>8} {:>9} {:>8} {:>12.3}",
                r.scorer, r.forwards, r.backwards, r.explainer_params, r.ms_per_cloud
            );
        }
    }
    s
}

/// Loss curves CSV: `epoch,ce,info,total`.
pub fn loss_curves_csv(curves: &[crate::explain::ExplainEpoch]) -> String {
    let mut s = String::from("epoch,ce,info,total\n");
    for e in curves {
        let _ = writeln!(s, "{},{:.9},{:.9},{:.9}", e.epoch, e.ce, e.info, e.total);
    }
    s
}

/// Classifier curves CSV: `epoch,train_loss,train_acc,test_acc`.
pub fn train_curves_csv(metrics: &[crate::model::EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,train_acc,test_acc\n");
    for m in metrics {
        let _ = writeln!(
            s,
            "{},{:.9},{:.9},{:.9}",
            m.epoch, m.train_loss, m.train_acc, m.test_acc
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Mode;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(score_color(0.0), (0, 0, 255));
        assert_eq!(score_color(1.0), (255, 0, 0));
        assert_eq!(score_color(0.5), (128, 0, 127));
    }

    #[test]
    fn svg_outputs_are_deterministic() {
        let pc = PointCloud::new(vec![[0.0, 0.5, -0.5], [0.2, -0.3, 0.9], [-1.0, 0.0, 0.1]]);
        let scores = vec![0.1, 0.9, 0.4];
        let a = scatter_svg(&pc, &scores, &[1], "cloud");
        let b = scatter_svg(&pc, &scores, &[1], "cloud");
        assert_eq!(a, b);
        assert!(a.contains("<svg"));
        assert!(a.ends_with("</svg>\n"));

        let rep = DropAttackReport {
            scorer: "demo".into(),
            mode: Mode::Mcd,
            budgets: vec![4, 8],
            accuracy: vec![0.9, 0.7],
            clouds: 10,
        };
        let c = curves_svg(&[rep.clone()], "curves");
        let d = curves_svg(&[rep], "curves");
        assert_eq!(c, d);
    }

    #[test]
    fn csv_formats() {
        let rep = DropAttackReport {
            scorer: "x".into(),
            mode: Mode::Lcd,
            budgets: vec![4],
            accuracy: vec![0.5],
            clouds: 2,
        };
        let csv = drop_curves_csv(&[rep]);
        assert!(csv.starts_with("scorer,mode,budget,accuracy\n"));
        assert!(csv.contains("x,lcd,4,0.500000000"));
    }
}
